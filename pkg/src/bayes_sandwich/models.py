"""Working-model families: log-likelihood, per-observation score, and the
scaled empirical Fisher information.

Four families are supported, all with canonical links:

* ``normal_mean``   ``Y ~ N(theta, tau)`` with ``tau`` fixed (possibly wrong)
* ``linear``        ``Y ~ N(x'beta, sigma2)``, ``sigma2`` a nuisance parameter
* ``poisson``       ``Y ~ Poisson(exp(x'beta))``
* ``exp_ph``        ``T ~ Exponential(rate=exp(x'beta))`` with right censoring

For every family the score and information share one canonical form,

    score_i  = x_i * r_i / alpha
    I_n      = (1/n) * sum_i x_i x_i' * v_i / alpha

so the batched helpers below only need the residual ``r``, the weight ``v``
and the dispersion ``alpha`` for each draw. The log-likelihood is written
from the density directly and never goes through that shortcut, which keeps
it usable as a finite-difference oracle for the other two.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum
from typing import Iterator, Optional

import numpy as np
from scipy.special import gammaln

from .errors import DataError, NumericalError

# exp(709.78) overflows float64
MAX_LINEAR_PREDICTOR = 700.0


class Family(str, Enum):
    NORMAL_MEAN = "normal_mean"
    LINEAR = "linear"
    POISSON = "poisson"
    EXP_PH = "exp_ph"

    @property
    def is_survival(self) -> bool:
        return self is Family.EXP_PH

    @property
    def is_glm(self) -> bool:
        return self in (Family.LINEAR, Family.POISSON)


@dataclass(frozen=True)
class ModelSpec:
    """A working model.

    ``assumed_variance`` is only read by ``normal_mean``; it is the variance
    the analyst (wrongly, perhaps) takes as known.
    """

    family: Family
    assumed_variance: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "family", Family(self.family))
        if not (np.isfinite(self.assumed_variance) and self.assumed_variance > 0):
            raise DataError("assumed_variance must be positive and finite")

    @property
    def dispersion_handling(self) -> str:
        if self.family is Family.LINEAR:
            return "sampled"
        if self.family is Family.NORMAL_MEAN:
            return "known"
        return "fixed"

    @property
    def has_sigma2(self) -> bool:
        return self.family is Family.LINEAR

    @classmethod
    def normal_mean(cls, assumed_variance: float = 1.0) -> "ModelSpec":
        return cls(Family.NORMAL_MEAN, assumed_variance)

    @classmethod
    def linear(cls) -> "ModelSpec":
        return cls(Family.LINEAR)

    @classmethod
    def poisson(cls) -> "ModelSpec":
        return cls(Family.POISSON)

    @classmethod
    def exp_ph(cls) -> "ModelSpec":
        return cls(Family.EXP_PH)


@dataclass(frozen=True)
class Observation:
    y: float
    x: np.ndarray
    event: Optional[bool] = None
    time: Optional[float] = None


def _as_float_array(values, name: str, ndim: int) -> np.ndarray:
    arr = np.array(values, dtype=float, ndmin=ndim)
    if arr.ndim != ndim:
        raise DataError(f"{name} must be {ndim}-dimensional, got shape {arr.shape}")
    if np.isnan(arr).any():
        raise DataError(f"{name} contains NaN")
    if not np.isfinite(arr).all():
        raise DataError(f"{name} contains non-finite values")
    arr.flags.writeable = False
    return arr


@dataclass(frozen=True)
class Dataset:
    """An ordered sample of observations stored column-wise.

    For survival data ``y`` conventionally holds the observed time as well.
    """

    y: np.ndarray
    X: np.ndarray
    event: Optional[np.ndarray] = None
    time: Optional[np.ndarray] = None

    def __post_init__(self):
        y = _as_float_array(self.y, "y", 1)
        X = np.asarray(self.X, dtype=float)
        if X.ndim == 1:
            X = X[:, None]
        X = _as_float_array(X, "X", 2)
        n = y.shape[0]
        if n < 1:
            raise DataError("dataset is empty")
        if X.shape[0] != n:
            raise DataError(f"X has {X.shape[0]} rows but y has {n} entries")
        if X.shape[1] < 1:
            raise DataError("X must have at least one column")
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "X", X)
        if (self.event is None) != (self.time is None):
            raise DataError("event and time must be given together")
        if self.event is not None:
            event = _as_float_array(self.event, "event", 1)
            time = _as_float_array(self.time, "time", 1)
            if event.shape[0] != n or time.shape[0] != n:
                raise DataError("event/time length does not match y")
            if not np.isin(event, (0.0, 1.0)).all():
                raise DataError("event indicators must be 0 or 1")
            if (time < 0).any():
                raise DataError("survival times must be nonnegative")
            object.__setattr__(self, "event", event)
            object.__setattr__(self, "time", time)

    @property
    def n(self) -> int:
        return self.y.shape[0]

    @property
    def p(self) -> int:
        return self.X.shape[1]

    @property
    def is_survival(self) -> bool:
        return self.event is not None

    @property
    def observations(self) -> list[Observation]:
        return list(self.iter_observations())

    def iter_observations(self) -> Iterator[Observation]:
        for i in range(self.n):
            if self.is_survival:
                yield Observation(self.y[i], self.X[i], bool(self.event[i]), float(self.time[i]))
            else:
                yield Observation(self.y[i], self.X[i])

    @classmethod
    def from_observations(cls, observations) -> "Dataset":
        obs = list(observations)
        if not obs:
            raise DataError("dataset is empty")
        widths = {np.size(o.x) for o in obs}
        if len(widths) != 1:
            raise DataError("observations do not share the same covariate dimension")
        surv = {o.event is not None for o in obs}
        if len(surv) != 1:
            raise DataError("mixed survival and non-survival observations")
        X = np.array([np.atleast_1d(o.x) for o in obs], dtype=float)
        y = np.array([o.y for o in obs], dtype=float)
        if obs[0].event is not None:
            return cls(y, X, [float(o.event) for o in obs], [o.time for o in obs])
        return cls(y, X)

    @classmethod
    def survival(cls, time, event, X) -> "Dataset":
        return cls(np.asarray(time, dtype=float), X, event, time)

    @classmethod
    def normal_sample(cls, y) -> "Dataset":
        y = np.asarray(y, dtype=float)
        return cls(y, np.ones((y.size, 1)))

    def subset(self, index) -> "Dataset":
        if self.is_survival:
            return Dataset(self.y[index], self.X[index], self.event[index], self.time[index])
        return Dataset(self.y[index], self.X[index])


@dataclass(frozen=True)
class ParamPoint:
    beta: np.ndarray
    sigma2: Optional[float] = None

    def __post_init__(self):
        beta = np.array(self.beta, dtype=float, ndmin=1)
        if beta.ndim != 1:
            raise DataError("beta must be a vector")
        if np.isnan(beta).any():
            raise DataError("beta contains NaN")
        beta.flags.writeable = False
        object.__setattr__(self, "beta", beta)
        if self.sigma2 is not None:
            s2 = float(self.sigma2)
            if np.isnan(s2):
                raise DataError("sigma2 is NaN")
            if s2 <= 0:
                raise DataError("sigma2 must be positive")
            object.__setattr__(self, "sigma2", s2)


def check_data(model: ModelSpec, data: Dataset) -> None:
    """Raise ``DataError`` if ``data`` cannot be analysed with ``model``."""
    fam = model.family
    if fam.is_survival and not data.is_survival:
        raise DataError("exponential PH model needs event and time columns")
    if not fam.is_survival and data.is_survival:
        raise DataError(f"{fam.value} model does not take event/time data")
    if fam is Family.NORMAL_MEAN and (data.p != 1 or not np.all(data.X == 1.0)):
        raise DataError("normal-mean model requires a single all-ones design column")
    if fam is Family.POISSON and (data.y < 0).any():
        raise DataError("Poisson outcomes must be nonnegative")


def check_theta(model: ModelSpec, theta: ParamPoint, p: Optional[int] = None) -> None:
    if p is not None and theta.beta.shape[0] != p:
        raise DataError(f"beta has length {theta.beta.shape[0]}, expected {p}")
    if model.has_sigma2 and theta.sigma2 is None:
        raise DataError("linear model needs sigma2")
    if not model.has_sigma2 and theta.sigma2 is not None:
        raise DataError(f"{model.family.value} model takes no sigma2")


def _as_theta(model: ModelSpec, theta) -> ParamPoint:
    if isinstance(theta, ParamPoint):
        return theta
    return ParamPoint(theta)


def _linear_predictor(X: np.ndarray, beta: np.ndarray) -> np.ndarray:
    eta = X @ beta
    if np.any(np.abs(eta) > MAX_LINEAR_PREDICTOR):
        raise NumericalError(
            f"linear predictor exceeds {MAX_LINEAR_PREDICTOR:g} in magnitude; exp() would overflow"
        )
    return eta


def log_likelihood(model: ModelSpec, theta, data: Dataset) -> float:
    """Sum of per-observation log densities, including normalizing constants."""
    theta = _as_theta(model, theta)
    check_data(model, data)
    check_theta(model, theta, data.p)
    fam = model.family
    if fam is Family.NORMAL_MEAN:
        tau = model.assumed_variance
        r = data.y - theta.beta[0]
        return float(-0.5 * data.n * np.log(2 * np.pi * tau) - 0.5 * np.sum(r * r) / tau)
    eta = _linear_predictor(data.X, theta.beta)
    if fam is Family.LINEAR:
        s2 = theta.sigma2
        r = data.y - eta
        return float(-0.5 * data.n * np.log(2 * np.pi * s2) - 0.5 * np.sum(r * r) / s2)
    if fam is Family.POISSON:
        return float(np.sum(data.y * eta - np.exp(eta) - gammaln(data.y + 1.0)))
    # density is [h exp(-h t)]^delta [exp(-h t)]^(1 - delta) with h = exp(eta)
    return float(np.sum(data.event * eta - np.exp(eta) * data.time))


def mean_and_variance_fn(model: ModelSpec, theta, obs: Observation) -> tuple[float, float]:
    """Mean-role and variance-role quantities for one observation.

    For ``exp_ph`` these are the cumulative hazard ``t * exp(x'beta)`` twice;
    its residual is taken against the event indicator.
    """
    theta = _as_theta(model, theta)
    fam = model.family
    if fam is Family.NORMAL_MEAN:
        return float(theta.beta[0]), 1.0
    x = np.atleast_1d(np.asarray(obs.x, dtype=float))
    if x.shape[0] != theta.beta.shape[0]:
        raise DataError("observation and beta dimensions differ")
    eta = float(_linear_predictor(x[None, :], theta.beta)[0])
    if fam is Family.LINEAR:
        return eta, 1.0
    if fam is Family.POISSON:
        mu = float(np.exp(eta))
        return mu, mu
    if obs.time is None:
        raise DataError("exp_ph observation needs a time")
    h = float(obs.time * np.exp(eta))
    return h, h


def _check_observation(model: ModelSpec, obs: Observation) -> None:
    if model.family.is_survival and (obs.event is None or obs.time is None):
        raise DataError("exp_ph observation needs event and time")
    if not model.family.is_survival and (obs.event is not None or obs.time is not None):
        raise DataError(f"{model.family.value} observation must not carry event/time")


def score(model: ModelSpec, theta, obs: Observation) -> np.ndarray:
    """Gradient of the single-observation log density with respect to beta.

    For the linear model ``sigma2`` is held at the value carried by ``theta``.
    """
    theta = _as_theta(model, theta)
    _check_observation(model, obs)
    check_theta(model, theta)
    mu, _ = mean_and_variance_fn(model, theta, obs)
    x = np.atleast_1d(np.asarray(obs.x, dtype=float))
    fam = model.family
    if fam is Family.NORMAL_MEAN:
        return np.array([(obs.y - mu) / model.assumed_variance])
    if fam is Family.LINEAR:
        return x * (obs.y - mu) / theta.sigma2
    if fam is Family.POISSON:
        return x * (obs.y - mu)
    return x * (float(obs.event) - mu)


def residuals_and_weights(model: ModelSpec, data: Dataset, betas: np.ndarray,
                          sigma2: Optional[np.ndarray] = None):
    """Canonical-form ingredients for a batch of parameter draws.

    Parameters
    ----------
    betas : (S, p) array
    sigma2 : (S,) array, linear model only

    Returns
    -------
    r : (n, S) residuals
    v : (n, S) variance weights
    alpha : (S,) dispersion
    """
    betas = np.atleast_2d(np.asarray(betas, dtype=float))
    S = betas.shape[0]
    fam = model.family
    if fam is Family.NORMAL_MEAN:
        r = data.y[:, None] - betas[:, 0][None, :]
        return r, np.ones_like(r), np.full(S, model.assumed_variance)
    eta = _linear_predictor(data.X, betas.T)
    if fam is Family.LINEAR:
        if sigma2 is None:
            raise DataError("linear model needs sigma2 draws")
        alpha = np.asarray(sigma2, dtype=float).reshape(S)
        r = data.y[:, None] - eta
        return r, np.ones_like(r), alpha
    if fam is Family.POISSON:
        mu = np.exp(eta)
        return data.y[:, None] - mu, mu, np.ones(S)
    h = data.time[:, None] * np.exp(eta)
    return data.event[:, None] - h, h, np.ones(S)


def outer_design(X: np.ndarray) -> np.ndarray:
    """(p*p, n) matrix of per-row outer products, for batched X' diag(w) X."""
    n, p = X.shape
    return np.einsum("ij,ik->jki", X, X).reshape(p * p, n)


def batched_meat_and_fisher(model: ModelSpec, data: Dataset, betas: np.ndarray,
                            sigma2: Optional[np.ndarray] = None,
                            xx: Optional[np.ndarray] = None):
    """Per-draw score outer-product mean and empirical Fisher information.

    Returns two (S, p, p) arrays: ``(1/n) sum score_i score_i'`` and ``I_n``.
    Both are symmetrized.
    """
    n, p = data.n, data.p
    if xx is None:
        xx = outer_design(data.X)
    r, v, alpha = residuals_and_weights(model, data, betas, sigma2)
    S = r.shape[1]
    meat = (xx @ (r * r)).T.reshape(S, p, p) / (n * alpha * alpha)[:, None, None]
    fisher = (xx @ v).T.reshape(S, p, p) / (n * alpha)[:, None, None]
    meat = 0.5 * (meat + meat.transpose(0, 2, 1))
    fisher = 0.5 * (fisher + fisher.transpose(0, 2, 1))
    return meat, fisher


def score_matrix(model: ModelSpec, theta, data: Dataset) -> np.ndarray:
    """(n, p) matrix whose rows are the per-observation scores."""
    theta = _as_theta(model, theta)
    check_data(model, data)
    check_theta(model, theta, data.p)
    s2 = None if theta.sigma2 is None else np.array([theta.sigma2])
    r, _, alpha = residuals_and_weights(model, data, theta.beta[None, :], s2)
    return data.X * (r[:, 0] / alpha[0])[:, None]


def empirical_fisher(model: ModelSpec, theta, data: Dataset) -> np.ndarray:
    """Scaled empirical Fisher information ``-(1/n) sum d2 log p / d beta2``."""
    theta = _as_theta(model, theta)
    check_data(model, data)
    check_theta(model, theta, data.p)
    s2 = None if theta.sigma2 is None else np.array([theta.sigma2])
    _, fisher = batched_meat_and_fisher(model, data, theta.beta[None, :], s2)
    return fisher[0]


def score_outer_mean(model: ModelSpec, theta, data: Dataset) -> np.ndarray:
    """``(1/n) sum_i score_i score_i'``, the meat of the sandwich."""
    theta = _as_theta(model, theta)
    check_data(model, data)
    check_theta(model, theta, data.p)
    s2 = None if theta.sigma2 is None else np.array([theta.sigma2])
    meat, _ = batched_meat_and_fisher(model, data, theta.beta[None, :], s2)
    return meat[0]
