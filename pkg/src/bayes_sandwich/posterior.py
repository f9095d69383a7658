"""Priors, log-posterior evaluation and posterior sampling.

Sampler per family:

* ``normal_mean``: exact i.i.d. draws from the conjugate normal posterior.
* ``linear``: two-block Gibbs (beta | sigma2 normal, sigma2 | beta inverse gamma).
* ``poisson`` / ``exp_ph``: random-walk Metropolis on beta, with the proposal
  covariance adapted during burn-in only and frozen afterwards.
"""

from __future__ import annotations

import csv
import warnings
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.special import gammaln

from . import _kernels, linalg
from .diagnostics import effective_sample_size, split_rhat
from .errors import DataError, NumericalError
from .frequentist import fit_mle
from .models import Dataset, Family, ModelSpec, ParamPoint, check_data, empirical_fisher, log_likelihood

MIN_RETAINED = 500
RHAT_WARN = 1.1


@dataclass(frozen=True)
class PriorSpec:
    """Independent normal priors on beta and an inverse-gamma prior on sigma2.

    ``sigma2_shape``/``sigma2_rate`` parameterize ``sigma2 ~ InvGamma(shape,
    rate)``. A ``Gamma(shape, rate)`` prior on the precision ``1/sigma2`` is
    the same distribution; use :meth:`with_precision_gamma` to state it that
    way.
    """

    beta_mean: float | np.ndarray = 0.0
    beta_var: float | np.ndarray = 1e3
    sigma2_shape: float = 0.01
    sigma2_rate: float = 0.01

    def __post_init__(self):
        bv = np.asarray(self.beta_var, dtype=float)
        if np.any(~np.isfinite(bv)) or np.any(bv <= 0):
            raise DataError("prior variances must be positive and finite")
        if not (self.sigma2_shape > 0 and self.sigma2_rate > 0):
            raise DataError("sigma2 prior shape and rate must be positive")
        if np.any(~np.isfinite(np.asarray(self.beta_mean, dtype=float))):
            raise DataError("prior means must be finite")

    @classmethod
    def with_precision_gamma(cls, shape: float, rate: float, beta_mean=0.0, beta_var=1e3) -> "PriorSpec":
        # 1/sigma2 ~ Gamma(shape, rate)  <=>  sigma2 ~ InvGamma(shape, rate)
        return cls(beta_mean, beta_var, shape, rate)

    def resolve(self, p: int) -> tuple[np.ndarray, np.ndarray]:
        mean = np.broadcast_to(np.asarray(self.beta_mean, dtype=float), (p,)).copy()
        var = np.broadcast_to(np.asarray(self.beta_var, dtype=float), (p,)).copy()
        return mean, var


@dataclass(frozen=True)
class McmcConfig:
    n_chains: int = 3
    n_iter: int = 30000
    n_burnin: int = 18000
    thin: int = 1
    seed: int = 0
    target_accept: float = 0.35
    adapt_window: int = 100

    def __post_init__(self):
        if self.n_chains < 1 or self.n_iter < 1 or self.thin < 1:
            raise DataError("n_chains, n_iter and thin must be positive")
        if not 0 <= self.n_burnin < self.n_iter:
            raise DataError("n_burnin must satisfy 0 <= n_burnin < n_iter")
        if not 0 < self.target_accept < 1:
            raise DataError("target_accept must lie in (0, 1)")
        if self.adapt_window < 1:
            raise DataError("adapt_window must be positive")
        if not 0 <= int(self.seed) < 2 ** 64:
            raise DataError("seed must be a 64-bit unsigned integer")

    @property
    def retained_per_chain(self) -> int:
        return (self.n_iter - self.n_burnin) // self.thin

    @classmethod
    def simulation(cls, seed: int = 0) -> "McmcConfig":
        """Reduced settings for large replicate campaigns."""
        return cls(n_chains=1, n_iter=6000, n_burnin=1000, seed=seed)


@dataclass(frozen=True)
class PosteriorSample:
    draws: np.ndarray
    sigma2_draws: Optional[np.ndarray]
    chain_ids: np.ndarray
    iterations: np.ndarray
    diagnostics: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        draws = np.array(self.draws, dtype=float, ndmin=2)
        if draws.shape[0] < 1:
            raise DataError("posterior sample is empty")
        S = draws.shape[0]
        draws.flags.writeable = False
        object.__setattr__(self, "draws", draws)
        if self.sigma2_draws is not None:
            s2 = np.array(self.sigma2_draws, dtype=float).reshape(S)
            if np.any(s2 <= 0):
                raise DataError("sigma2 draws must be positive")
            s2.flags.writeable = False
            object.__setattr__(self, "sigma2_draws", s2)
        chain_ids = np.array(self.chain_ids, dtype=np.int64).reshape(S)
        iterations = np.array(self.iterations, dtype=np.int64).reshape(S)
        chain_ids.flags.writeable = False
        iterations.flags.writeable = False
        object.__setattr__(self, "chain_ids", chain_ids)
        object.__setattr__(self, "iterations", iterations)

    @property
    def S(self) -> int:
        return self.draws.shape[0]

    @property
    def p(self) -> int:
        return self.draws.shape[1]

    @property
    def n_chains(self) -> int:
        return len(np.unique(self.chain_ids))

    @classmethod
    def from_draws(cls, draws, sigma2_draws=None) -> "PosteriorSample":
        """Single-chain sample from an array of draws, without diagnostics."""
        draws = np.asarray(draws, dtype=float)
        if draws.ndim == 1:
            draws = draws[:, None]
        S = draws.shape[0]
        return cls(draws, sigma2_draws, np.zeros(S), np.arange(S))

    def chains(self) -> list[int]:
        return sorted(np.unique(self.chain_ids).tolist())

    def by_chain(self, values: np.ndarray) -> np.ndarray:
        """Stack ``values`` (indexed by draw) into (n_chains, n_per_chain, ...)."""
        ids = self.chains()
        parts = [values[self.chain_ids == c] for c in ids]
        m = min(len(x) for x in parts)
        return np.stack([x[:m] for x in parts])

    def to_bytes(self) -> bytes:
        parts = [self.draws.tobytes(), self.chain_ids.tobytes(), self.iterations.tobytes()]
        if self.sigma2_draws is not None:
            parts.append(self.sigma2_draws.tobytes())
        return b"".join(parts)


def posterior_mean(s: PosteriorSample) -> np.ndarray:
    return s.draws.mean(axis=0)


def posterior_cov(s: PosteriorSample) -> np.ndarray:
    """Sample covariance of the retained draws (denominator S - 1)."""
    if s.S < 2:
        raise DataError("posterior covariance needs at least two draws")
    centered = s.draws - s.draws.mean(axis=0)
    cov = centered.T @ centered / (s.S - 1)
    return 0.5 * (cov + cov.T)


def _normal_logpdf(x, mean, var):
    return -0.5 * np.log(2 * np.pi * var) - 0.5 * (x - mean) ** 2 / var


def _invgamma_logpdf(x, shape, rate):
    return shape * np.log(rate) - gammaln(shape) - (shape + 1) * np.log(x) - rate / x


def log_posterior(model: ModelSpec, prior: PriorSpec, theta, data: Dataset) -> float:
    """Log-likelihood plus log prior density (both normalized).

    ``theta`` may be a :class:`ParamPoint` or a ``(beta, sigma2)`` pair. A
    nonpositive ``sigma2`` yields ``-inf``; NaN inputs raise ``DataError``.
    """
    if isinstance(theta, ParamPoint):
        beta, sigma2 = theta.beta, theta.sigma2
    elif isinstance(theta, tuple):
        beta, sigma2 = theta
    else:
        beta, sigma2 = theta, None
    beta = np.array(beta, dtype=float, ndmin=1)
    if np.isnan(beta).any() or (sigma2 is not None and np.isnan(sigma2)):
        raise DataError("parameter contains NaN")
    check_data(model, data)
    if model.has_sigma2:
        if sigma2 is None:
            raise DataError("linear model needs sigma2")
        if sigma2 <= 0:
            return -np.inf
    point = ParamPoint(beta, sigma2)
    mean, var = prior.resolve(data.p)
    lp = log_likelihood(model, point, data) + float(np.sum(_normal_logpdf(beta, mean, var)))
    if model.has_sigma2:
        lp += float(_invgamma_logpdf(sigma2, prior.sigma2_shape, prior.sigma2_rate))
    return lp


def _chain_rngs(cfg: McmcConfig) -> list[np.random.Generator]:
    children = np.random.SeedSequence(int(cfg.seed)).spawn(cfg.n_chains)
    return [np.random.default_rng(c) for c in children]


def _retained_index(cfg: McmcConfig) -> np.ndarray:
    # iteration numbers (1-based) kept after burn-in and thinning
    return cfg.n_burnin + cfg.thin * np.arange(1, cfg.retained_per_chain + 1)


def _sample_normal_mean(model, prior, data, cfg):
    mean0, var0 = prior.resolve(1)
    tau = model.assumed_variance
    prec = 1.0 / var0[0] + data.n / tau
    post_mean = (mean0[0] / var0[0] + data.y.sum() / tau) / prec
    sd = np.sqrt(1.0 / prec)
    R = cfg.retained_per_chain
    chains = [post_mean + sd * rng.standard_normal(R) for rng in _chain_rngs(cfg)]
    return [c[:, None] for c in chains], None, {}


def _sample_linear(model, prior, data, cfg, fit):
    mean0, var0 = prior.resolve(data.p)
    prec0 = 1.0 / var0
    X, y = data.X, data.y
    XtX = X.T @ X
    Xty = X.T @ y
    shape = prior.sigma2_shape + 0.5 * data.n
    keep = _retained_index(cfg) - 1
    beta_chains, s2_chains = [], []
    for rng in _chain_rngs(cfg):
        s2_init = fit.sigma2_mle * float(np.exp(0.5 * rng.standard_normal()))
        z = rng.standard_normal((cfg.n_iter, data.p))
        gam = rng.gamma(shape, 1.0, cfg.n_iter)
        betas = np.empty((cfg.n_iter, data.p))
        s2 = np.empty(cfg.n_iter)
        ok = _kernels.gibbs_linear(X, y, XtX, Xty, prec0, prec0 * mean0, prior.sigma2_rate,
                                   s2_init, z, gam, betas, s2)
        if not ok:
            raise NumericalError("Gibbs precision matrix lost positive definiteness")
        beta_chains.append(betas[keep])
        s2_chains.append(s2[keep])
    return beta_chains, s2_chains, {}


def _sample_rwm(model, prior, data, cfg, fit):
    mean0, var0 = prior.resolve(data.p)
    prec0 = 1.0 / var0
    X = data.X
    if model.family is Family.POISSON:
        a, w = data.y, np.ones(data.n)
    else:
        a, w = data.event, data.time
    p = data.p
    fisher = empirical_fisher(model, fit.param, data)
    init_cov = linalg.solve_pd(fisher, np.eye(p), "Fisher information at the MLE") / data.n
    init_cov = 0.5 * (init_cov + init_cov.T)
    init_chol = linalg.cholesky(init_cov, "initial proposal covariance")
    base = 2.38 ** 2 / p
    keep = _retained_index(cfg) - cfg.n_burnin - 1

    chains, acc_rates = [], []
    for rng in _chain_rngs(cfg):
        beta = fit.theta_mle + init_chol @ rng.standard_normal(p)
        logp = _kernels.log_post_expfam(X, a, w, mean0, prec0, beta)
        if not np.isfinite(logp):
            beta = fit.theta_mle.copy()
            logp = _kernels.log_post_expfam(X, a, w, mean0, prec0, beta)
        chol = np.sqrt(base) * init_chol
        log_scale = 0.0
        history = []
        done, k = 0, 0
        while done < cfg.n_burnin:
            m = min(cfg.adapt_window, cfg.n_burnin - done)
            z = rng.standard_normal((m, p))
            logu = np.log(rng.random(m))
            out = np.empty((m, p))
            beta, logp, acc = _kernels.rwm_expfam(X, a, w, mean0, prec0, beta, logp, chol, z, logu, out)
            done += m
            k += 1
            if k > 1:
                history.append(out)
            log_scale += (acc / m - cfg.target_accept) / np.sqrt(k)
            cov = init_cov
            if history:
                hist = np.concatenate(history)
                if hist.shape[0] > 2 * p:
                    emp = np.cov(hist, rowvar=False).reshape(p, p)
                    cov = emp + 1e-6 * np.diag(np.diag(init_cov))
            try:
                chol = np.exp(log_scale) * np.sqrt(base) * linalg.cholesky(cov)
            except NumericalError:
                chol = np.exp(log_scale) * np.sqrt(base) * init_chol
        M = cfg.n_iter - cfg.n_burnin
        z = rng.standard_normal((M, p))
        logu = np.log(rng.random(M))
        out = np.empty((M, p))
        beta, logp, acc = _kernels.rwm_expfam(X, a, w, mean0, prec0, beta, logp, chol, z, logu, out)
        chains.append(out[keep])
        acc_rates.append(acc / M)
    return chains, None, {"acceptance_rate": acc_rates}


def sample_posterior(model: ModelSpec, prior: PriorSpec, data: Dataset, cfg: McmcConfig,
                     fit=None) -> PosteriorSample:
    """Draw from the posterior of beta (and sigma2 for the linear model).

    ``fit`` is an optional precomputed :func:`fit_mle` result used to start the
    chains and scale the Metropolis proposal. Deterministic given
    ``cfg.seed``.
    """
    check_data(model, data)
    if fit is None:
        fit = fit_mle(model, data)
    elif data.n <= data.p:
        raise DataError(f"need n > p for estimation (n={data.n}, p={data.p})")
    fam = model.family
    if fam is Family.NORMAL_MEAN:
        beta_chains, s2_chains, extra = _sample_normal_mean(model, prior, data, cfg)
    elif fam is Family.LINEAR:
        beta_chains, s2_chains, extra = _sample_linear(model, prior, data, cfg, fit)
    else:
        beta_chains, s2_chains, extra = _sample_rwm(model, prior, data, cfg, fit)

    R = cfg.retained_per_chain
    draws = np.concatenate(beta_chains)
    sigma2 = np.concatenate(s2_chains) if s2_chains is not None else None
    chain_ids = np.repeat(np.arange(cfg.n_chains), R)
    iterations = np.tile(_retained_index(cfg), cfg.n_chains)
    diagnostics = _diagnose(np.stack(beta_chains), None if s2_chains is None else np.stack(s2_chains), cfg)
    diagnostics.update(extra)
    return PosteriorSample(draws, sigma2, chain_ids, iterations, diagnostics)


def _diagnose(beta_chains: np.ndarray, s2_chains: Optional[np.ndarray], cfg: McmcConfig) -> dict:
    p = beta_chains.shape[2]
    diag = {"rhat": [], "ess": [], "warnings": []}
    R = beta_chains.shape[1]
    if R >= 4:
        for j in range(p):
            diag["rhat"].append(split_rhat(beta_chains[:, :, j]))
            diag["ess"].append(effective_sample_size(beta_chains[:, :, j]))
        if s2_chains is not None:
            diag["rhat_sigma2"] = split_rhat(s2_chains)
            diag["ess_sigma2"] = effective_sample_size(s2_chains)
    bad = [j for j, r in enumerate(diag["rhat"]) if r > RHAT_WARN]
    if bad:
        diag["warnings"].append(f"R-hat above {RHAT_WARN} for coefficient(s) {bad}")
    if R < MIN_RETAINED:
        msg = f"only {R} retained draws per chain (< {MIN_RETAINED}); estimates may be noisy"
        diag["warnings"].append(msg)
        warnings.warn(msg, stacklevel=3)
    return diag


def write_draws_csv(s: PosteriorSample, path) -> None:
    """One row per retained draw: chain, iter, beta_0..beta_{p-1}[, sigma2]."""
    header = ["chain", "iter"] + [f"beta_{j}" for j in range(s.p)]
    if s.sigma2_draws is not None:
        header.append("sigma2")
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for k in range(s.S):
            row = [int(s.chain_ids[k]), int(s.iterations[k])] + [repr(float(v)) for v in s.draws[k]]
            if s.sigma2_draws is not None:
                row.append(repr(float(s.sigma2_draws[k])))
            writer.writerow(row)
