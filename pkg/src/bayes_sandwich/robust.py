"""Inference losses and their Bayes rules.

The balanced inference loss

    L(theta, d, Sigma, Omega) = log|Sigma|
                                + (theta - d)' Omega Sigma^-1 (theta - d)
                                + (1/n) sum_i s_i(theta)' {Omega I_n(theta)}^-1 s_i(theta)

is minimized in posterior expectation by the posterior mean ``d_hat``,

    Omega_hat = E[ (1/n) sum_i s_i s_i' I_n^-1 | data ]
    Sigma_hat = Var(theta | data) Omega_hat

and ``sqrt(diag(Sigma_hat))`` is the Bayesian robust standard error (BRSE).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.special import ndtri

from . import linalg
from .errors import DataError, NumericalError
from .models import (
    Dataset,
    Family,
    ModelSpec,
    ParamPoint,
    batched_meat_and_fisher,
    check_data,
    check_theta,
    empirical_fisher,
    outer_design,
    residuals_and_weights,
    score_matrix,
)
from .posterior import PosteriorSample, posterior_cov, posterior_mean

DRAW_CHUNK = 4096


@dataclass(frozen=True)
class LossValue:
    total: float
    logdet_term: float
    estimation_term: float
    lack_of_fit_term: float = 0.0


@dataclass(frozen=True)
class IntervalPair:
    credible: tuple[float, float]
    robust: tuple[float, float]


@dataclass(frozen=True)
class BrseResult:
    d_hat: np.ndarray
    omega_hat: np.ndarray
    sigma_hat: np.ndarray
    post_cov: np.ndarray
    post_sd: np.ndarray
    brse: np.ndarray
    symmetrized_sigma: np.ndarray
    level: float
    intervals: list[IntervalPair] = field(default_factory=list)
    error: Optional[str] = None

    @property
    def valid(self) -> bool:
        return self.error is None


def _beta(theta) -> np.ndarray:
    if isinstance(theta, ParamPoint):
        return theta.beta
    return np.atleast_1d(np.asarray(theta, dtype=float))


def inference_loss(theta, d, Sigma) -> LossValue:
    """``log|Sigma| + (theta - d)' Sigma^-1 (theta - d)``; Sigma must be PD."""
    delta = _beta(theta) - np.atleast_1d(np.asarray(d, dtype=float))
    Sigma = np.atleast_2d(np.asarray(Sigma, dtype=float))
    L = linalg.cholesky(Sigma, "Sigma")
    logdet = float(2.0 * np.sum(np.log(np.diag(L))))
    u = np.linalg.solve(L, delta)
    quad = float(u @ u)
    return LossValue(logdet + quad, logdet, quad, 0.0)


def _pd_logdet(M: np.ndarray, what: str) -> float:
    sign, logdet = np.linalg.slogdet(M)
    if sign <= 0:
        raise NumericalError(f"{what} must have positive determinant")
    return float(logdet)


def balanced_inference_loss(model: ModelSpec, theta, d, Sigma, Omega, data: Dataset) -> LossValue:
    """Evaluate the balanced inference loss at one parameter value.

    The lack-of-fit term needs one linear solve of ``Omega I_n(theta)``
    against the stacked scores.
    """
    if not isinstance(theta, ParamPoint):
        theta = ParamPoint(theta)
    check_data(model, data)
    check_theta(model, theta, data.p)
    Sigma = np.atleast_2d(np.asarray(Sigma, dtype=float))
    Omega = np.atleast_2d(np.asarray(Omega, dtype=float))
    delta = theta.beta - np.atleast_1d(np.asarray(d, dtype=float))
    logdet = _pd_logdet(Sigma, "Sigma")
    est = float(delta @ Omega @ linalg.solve(Sigma, delta, "Sigma"))
    scores = score_matrix(model, theta, data)
    OI = Omega @ empirical_fisher(model, theta, data)
    solved = linalg.solve(OI, scores.T, "Omega I_n(theta)")
    lof = float(np.sum(scores.T * solved) / data.n)
    return LossValue(logdet + est + lof, logdet, est, lof)


def glm_balanced_inference_loss(model: ModelSpec, theta, d, Sigma, Omega, data: Dataset) -> LossValue:
    """Canonical-link GLM form of the balanced inference loss.

    Lack of fit is written as squared Pearson residuals weighted by a
    modified leverage ``h_i = V_i x_i' (Omega X'VX)^-1 x_i``. Algebraically
    equal to :func:`balanced_inference_loss` for the linear and Poisson
    families, but built from the hat-matrix ingredients instead of the score
    and information.
    """
    if model.family not in (Family.LINEAR, Family.POISSON):
        raise DataError("GLM form applies to the linear and Poisson families")
    if not isinstance(theta, ParamPoint):
        theta = ParamPoint(theta)
    check_theta(model, theta, data.p)
    Sigma = np.atleast_2d(np.asarray(Sigma, dtype=float))
    Omega = np.atleast_2d(np.asarray(Omega, dtype=float))
    delta = theta.beta - np.atleast_1d(np.asarray(d, dtype=float))
    X = data.X
    eta = X @ theta.beta
    if model.family is Family.LINEAR:
        mu, V, alpha = eta, np.ones(data.n), theta.sigma2
    else:
        mu = np.exp(eta)
        V, alpha = mu, 1.0
    pearson2 = (data.y - mu) ** 2 / (alpha * V)
    XtVX = X.T @ (V[:, None] * X)
    G = np.linalg.solve(Omega @ XtVX, X.T)
    leverage = V * np.einsum("ij,ji->i", X, G)
    lof = float(np.sum(pearson2 * leverage))
    sign, logdet = np.linalg.slogdet(Sigma)
    est = float(delta @ Omega @ np.linalg.solve(Sigma, delta))
    return LossValue(logdet + est + lof, float(logdet), est, lof)


def _iter_chunks(S: int, chunk: int):
    for start in range(0, S, chunk):
        yield start, min(S, start + chunk)


def _draw_terms(model: ModelSpec, s: PosteriorSample, data: Dataset, lo: int, hi: int, xx):
    s2 = None if s.sigma2_draws is None else s.sigma2_draws[lo:hi]
    meat, fisher = batched_meat_and_fisher(model, data, s.draws[lo:hi], s2, xx)
    cond = linalg.sym_pd_condition(fisher)
    bad = np.flatnonzero(~(cond <= linalg.MAX_CONDITION))
    if bad.size:
        raise NumericalError(
            f"empirical Fisher information is singular at draw {lo + int(bad[0])} "
            f"(cond={cond[bad[0]]:.3g})"
        )
    return meat, fisher


def omega_hat(model: ModelSpec, s: PosteriorSample, data: Dataset) -> np.ndarray:
    """Posterior mean of ``A_n(theta) = [(1/n) sum s_i s_i'] I_n(theta)^-1``.

    All retained draws are weighted equally; draws are reduced in index order.
    """
    check_data(model, data)
    if s.p != data.p:
        raise DataError("posterior sample and data dimensions differ")
    if model.has_sigma2 and s.sigma2_draws is None:
        raise DataError("linear model needs sigma2 draws")
    xx = outer_design(data.X)
    total = np.zeros((data.p, data.p))
    for lo, hi in _iter_chunks(s.S, DRAW_CHUNK):
        meat, fisher = _draw_terms(model, s, data, lo, hi, xx)
        # A = M I^-1 = (I^-1 M)' for symmetric M and I
        A = np.linalg.solve(fisher, meat).transpose(0, 2, 1)
        total += A.sum(axis=0)
    return total / s.S


def sigma_hat(s: PosteriorSample, omega: np.ndarray) -> np.ndarray:
    """``Var(theta | data) @ Omega_hat``; not symmetric in general."""
    return posterior_cov(s) @ np.atleast_2d(omega)


def normal_quantile(prob: float) -> float:
    if not 0.0 < prob < 1.0:
        raise DataError("probability must lie in (0, 1)")
    return float(ndtri(prob))


def brse_intervals(d_hat, post_sd, brse, level: float = 0.95, method: str = "normal",
                   draws: Optional[np.ndarray] = None) -> list[IntervalPair]:
    """Credible and Bayesian robust intervals per coefficient.

    The robust interval is ``d_hat +- z * brse``. The credible interval is
    ``d_hat +- z * post_sd`` by default, or equal-tailed posterior quantiles
    with ``method="quantile"`` (needs ``draws``).
    """
    if not 0.0 < level < 1.0:
        raise DataError("level must lie in (0, 1)")
    d_hat = np.atleast_1d(d_hat)
    post_sd = np.atleast_1d(post_sd)
    brse = np.atleast_1d(brse)
    if np.any(~(brse > 0)):
        raise NumericalError("robust intervals need positive diag(Sigma_hat)")
    z = normal_quantile(0.5 + level / 2.0)
    if method == "quantile":
        if draws is None:
            raise DataError("quantile credible intervals need the posterior draws")
        q = np.quantile(draws, [(1 - level) / 2, (1 + level) / 2], axis=0)
        cred = [(float(q[0, j]), float(q[1, j])) for j in range(d_hat.size)]
    elif method == "normal":
        cred = [(float(d_hat[j] - z * post_sd[j]), float(d_hat[j] + z * post_sd[j])) for j in range(d_hat.size)]
    else:
        raise DataError(f"unknown credible interval method {method!r}")
    return [
        IntervalPair(cred[j], (float(d_hat[j] - z * brse[j]), float(d_hat[j] + z * brse[j])))
        for j in range(d_hat.size)
    ]


def compute_brse(model: ModelSpec, s: PosteriorSample, data: Dataset, level: float = 0.95,
                 credible: str = "normal") -> BrseResult:
    """Full set of Bayes rules and intervals from one posterior sample.

    A nonpositive diagonal entry of ``Sigma_hat`` is reported in
    ``result.error`` (with NaN BRSE there and no intervals), never clipped.
    """
    d = posterior_mean(s)
    V = posterior_cov(s)
    om = omega_hat(model, s, data)
    sig = V @ om
    diag = np.diag(sig)
    error = None
    if np.any(~(diag > 0)):
        bad = np.flatnonzero(~(diag > 0)).tolist()
        error = f"nonpositive diagonal of Sigma_hat at coefficient(s) {bad}"
    with np.errstate(invalid="ignore"):
        brse = np.where(diag > 0, np.sqrt(np.where(diag > 0, diag, 1.0)), np.nan)
    post_sd = np.sqrt(np.diag(V))
    intervals = [] if error else brse_intervals(d, post_sd, brse, level, credible, s.draws)
    return BrseResult(
        d_hat=d,
        omega_hat=om,
        sigma_hat=sig,
        post_cov=V,
        post_sd=post_sd,
        brse=brse,
        symmetrized_sigma=0.5 * (sig + sig.T),
        level=level,
        intervals=intervals,
        error=error,
    )


def quasi_omega(model: ModelSpec, s: PosteriorSample, data: Dataset) -> float:
    """Posterior mean of the average squared Pearson residual
    ``(1/n) sum (y_i - mu_i)^2 / (alpha V_i)``."""
    if not model.family.is_glm:
        raise DataError("quasi-likelihood scaling applies to GLM families only")
    check_data(model, data)
    total = 0.0
    for lo, hi in _iter_chunks(s.S, DRAW_CHUNK):
        s2 = None if s.sigma2_draws is None else s.sigma2_draws[lo:hi]
        r, v, alpha = residuals_and_weights(model, data, s.draws[lo:hi], s2)
        total += float(np.sum(np.mean(r * r / v, axis=0) / alpha))
    return total / s.S


def quasi_sigma_hat(model: ModelSpec, s: PosteriorSample, data: Dataset) -> np.ndarray:
    return quasi_omega(model, s, data) * posterior_cov(s)


def closed_form_normal_mean(data: Dataset | np.ndarray, mu: float, eta2: float) -> tuple[float, float, float]:
    """Exact Bayes rules for a normal mean analysed with unit variance and a
    ``N(mu, eta2)`` prior: returns ``(d_hat, omega_hat, sigma2_hat)``."""
    y = data.y if isinstance(data, Dataset) else np.atleast_1d(np.asarray(data, dtype=float))
    n = y.size
    if n < 1:
        raise DataError("dataset is empty")
    if not eta2 > 0:
        raise DataError("prior variance must be positive")
    ybar = y.mean()
    ss = float(np.sum((y - ybar) ** 2))
    k = n * eta2 + 1.0
    d_hat = (mu + n * eta2 * ybar) / k
    omega = ss / n + eta2 / k + ((mu - ybar) / k) ** 2
    sigma2 = eta2 * ss / (n * k) + (eta2 / k) ** 2 + eta2 * (mu - ybar) ** 2 / k ** 3
    return float(d_hat), float(omega), float(sigma2)


def inference_posterior_risk(s: PosteriorSample, d, Sigma) -> float:
    """Monte Carlo posterior risk of the inference loss over the draws."""
    delta = s.draws - np.atleast_1d(d)
    Sigma = np.atleast_2d(Sigma)
    L = linalg.cholesky(Sigma, "Sigma")
    u = np.linalg.solve(L, delta.T)
    return float(2 * np.sum(np.log(np.diag(L))) + np.mean(np.sum(u * u, axis=0)))


def balanced_posterior_risk(model: ModelSpec, s: PosteriorSample, data: Dataset, d, Sigma, Omega) -> float:
    """Monte Carlo posterior risk of the balanced inference loss.

    Uses ``(1/n) sum s_i' (Omega I_n)^-1 s_i = tr((Omega I_n)^-1 M_n)``.
    """
    Sigma = np.atleast_2d(Sigma)
    Omega = np.atleast_2d(Omega)
    delta = s.draws - np.atleast_1d(d)
    logdet = _pd_logdet(Sigma, "Sigma")
    K = Omega @ linalg.solve(Sigma, np.eye(Sigma.shape[0]), "Sigma")
    est = float(np.mean(np.einsum("sj,jk,sk->s", delta, K, delta)))
    xx = outer_design(data.X)
    lof = 0.0
    for lo, hi in _iter_chunks(s.S, DRAW_CHUNK):
        meat, fisher = _draw_terms(model, s, data, lo, hi, xx)
        sol = np.linalg.solve(Omega[None] @ fisher, meat)
        lof += float(np.trace(sol, axis1=1, axis2=2).sum())
    return logdet + est + lof / s.S
