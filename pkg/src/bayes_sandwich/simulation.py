"""Data-generating processes, minimal-KL points and replicated simulation
campaigns comparing posterior SD, BRSE and the frequentist sandwich."""

from __future__ import annotations

import hashlib
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from functools import lru_cache
from typing import Optional

import numpy as np
from scipy.special import gamma as gamma_fn
from scipy.special import gammainc

from .errors import BrseError, DataError
from .frequentist import fit_mle
from .models import Dataset, ModelSpec
from .posterior import McmcConfig, PriorSpec, sample_posterior
from .robust import compute_brse, normal_quantile

KINDS = ("linear_quadratic", "poisson_quadratic", "weibull_ph", "fixed_linear_quadratic")
COVARIATE_LAWS = ("uniform", "normal")
MAX_FAILED_FRACTION = 0.05
SLOPE = 1
WORKERS_ENV = "BRSE_WORKERS"


@dataclass(frozen=True)
class DgpSpec:
    """One data-generating scenario.

    ``a`` is the quadratic coefficient for the regression kinds; ``kappa`` and
    ``beta`` (intercept, slope) parameterize the Weibull PH kind.

    ``covariate_law="normal"`` replaces the uniform Weibull PH covariate by a
    standard normal one; the other kinds only support the uniform law.
    """

    kind: str
    n: int
    a: float = 0.0
    kappa: float = 1.0
    beta: tuple[float, float] = (0.0, 0.0)
    censor_time: float = 10.0
    covariate_law: str = "uniform"

    def __post_init__(self):
        if self.kind not in KINDS:
            raise DataError(f"unknown DGP kind {self.kind!r}; expected one of {KINDS}")
        if self.n < 3:
            raise DataError("n must be at least p + 1 = 3")
        if self.kappa <= 0 or self.censor_time <= 0:
            raise DataError("kappa and censor_time must be positive")
        if self.covariate_law not in COVARIATE_LAWS:
            raise DataError(f"unknown covariate law {self.covariate_law!r}; expected one of {COVARIATE_LAWS}")
        if self.covariate_law != "uniform" and self.kind != "weibull_ph":
            raise DataError("only the weibull_ph kind supports a non-uniform covariate law")
        object.__setattr__(self, "beta", tuple(float(b) for b in self.beta))

    @property
    def scenario_id(self) -> str:
        if self.kind == "weibull_ph":
            law = "" if self.covariate_law == "uniform" else f":u={self.covariate_law}"
            return f"{self.kind}:n={self.n}:kappa={self.kappa:g}:beta={self.beta[1]:g}{law}"
        return f"{self.kind}:n={self.n}:a={self.a:g}"

    @property
    def correctly_specified(self) -> bool:
        if self.kind == "weibull_ph":
            return self.kappa == 1.0
        return self.a == 0.0

    @property
    def model(self) -> ModelSpec:
        if self.kind == "poisson_quadratic":
            return ModelSpec.poisson()
        if self.kind == "weibull_ph":
            return ModelSpec.exp_ph()
        return ModelSpec.linear()

    @property
    def covariate_range(self) -> tuple[float, float]:
        return (-3.0, 3.0) if self.kind == "poisson_quadratic" else (0.0, 3.0)


def generate(dgp: DgpSpec, seed) -> Dataset:
    """Draw one dataset; deterministic in ``seed`` (int or ``SeedSequence``)."""
    rng = np.random.default_rng(seed)
    lo, hi = dgp.covariate_range
    n = dgp.n
    if dgp.kind == "fixed_linear_quadratic":
        u = np.linspace(lo, hi, n)
    elif dgp.covariate_law == "normal":
        u = rng.standard_normal(n)
    else:
        u = rng.uniform(lo, hi, n)
    X = np.column_stack([np.ones(n), u])
    if dgp.kind in ("linear_quadratic", "fixed_linear_quadratic"):
        y = u + dgp.a * u ** 2 + rng.standard_normal(n)
        return Dataset(y, X)
    if dgp.kind == "poisson_quadratic":
        # log-rate u + a u^2 so that a = 0 is the canonical-link model
        y = rng.poisson(np.exp(u + dgp.a * u ** 2)).astype(float)
        return Dataset(y, X)
    lam = np.exp(dgp.beta[0] + dgp.beta[1] * u)
    t = (-np.log(rng.uniform(size=n)) / lam) ** (1.0 / dgp.kappa)
    event = (t <= dgp.censor_time).astype(float)
    return Dataset.survival(np.minimum(t, dgp.censor_time), event, X)


@dataclass(frozen=True)
class KLPoint:
    value: np.ndarray
    mc_se: Optional[np.ndarray]
    method: str


def _stable_int(text: str) -> int:
    return int.from_bytes(hashlib.sha256(text.encode()).digest()[:8], "little")


def _oracle_key(dgp: DgpSpec) -> DgpSpec:
    # the population KL point does not depend on n except under a fixed design
    if dgp.kind == "fixed_linear_quadratic":
        return dgp
    return replace(dgp, n=3)


def _linear_projection(dgp: DgpSpec) -> np.ndarray:
    if dgp.kind == "fixed_linear_quadratic":
        u = np.linspace(0.0, 3.0, dgp.n)
        X = np.column_stack([np.ones(dgp.n), u])
        beta, *_ = np.linalg.lstsq(X, u + dgp.a * u ** 2, rcond=None)
        return beta
    # U(0,3): E U = 1.5, Var U = 0.75, Cov(U, U^2) = 2.25
    slope = 1.0 + 3.0 * dgp.a
    intercept = 1.5 + 3.0 * dgp.a - slope * 1.5
    return np.array([intercept, slope])


def _covariate_nodes(dgp: DgpSpec, m: int = 400):
    """Quadrature nodes and probability weights for the covariate law."""
    if dgp.covariate_law == "normal":
        x, w = np.polynomial.hermite_e.hermegauss(150)
        return x, w / w.sum()
    lo, hi = dgp.covariate_range
    x, w = np.polynomial.legendre.leggauss(m)
    return 0.5 * (hi - lo) * x + 0.5 * (hi + lo), 0.5 * w


def _quadrature_point(dgp: DgpSpec) -> np.ndarray:
    """Solve the population score equation ``E[x (A(u) - W(u) exp(x'b))] = 0``.

    ``A`` and ``W`` are the conditional means of the outcome (Poisson) or of
    the event indicator and observed time (Weibull), integrated exactly in t
    and by Gauss quadrature in u.
    """
    u, w = _covariate_nodes(dgp)
    X = np.column_stack([np.ones_like(u), u])
    if dgp.kind == "poisson_quadratic":
        A = np.exp(u + dgp.a * u ** 2)
        W = np.ones_like(u)
    else:
        lam = np.exp(dgp.beta[0] + dgp.beta[1] * u)
        k, C = dgp.kappa, dgp.censor_time
        z = lam * C ** k
        A = -np.expm1(-z)
        # int_0^C exp(-lam t^k) dt = lam^(-1/k) Gamma(1/k) P(1/k, lam C^k) / k
        W = lam ** (-1.0 / k) * gamma_fn(1.0 / k) * gammainc(1.0 / k, z) / k
    b = np.zeros(2)
    b[0] = np.log(np.sum(w * A) / np.sum(w * W))
    for _ in range(100):
        m = W * np.exp(X @ b)
        grad = X.T @ (w * (A - m))
        hess = X.T @ ((w * m)[:, None] * X)
        step = np.linalg.solve(hess, grad)
        b = b + step
        if np.max(np.abs(step)) < 1e-13:
            break
    return b


@lru_cache(maxsize=64)
def _kl_cached(dgp: DgpSpec, method: str, n_oracle: int, seed: int) -> KLPoint:
    if dgp.kind in ("linear_quadratic", "fixed_linear_quadratic"):
        return KLPoint(_linear_projection(dgp), None, "closed_form")
    if method == "quadrature":
        return KLPoint(_quadrature_point(dgp), None, "quadrature")
    big = replace(dgp, n=n_oracle)
    data = generate(big, np.random.SeedSequence([seed, _stable_int(dgp.scenario_id)]))
    fit = fit_mle(dgp.model, data, tol=1e-7)
    return KLPoint(fit.theta_mle, fit.robust_se, "monte_carlo")


def kl_point(dgp: DgpSpec, model: Optional[ModelSpec] = None, method: str = "monte_carlo",
             n_oracle: Optional[int] = None, seed: int = 20240101) -> KLPoint:
    """Minimal Kullback-Leibler point of the working model under ``dgp``.

    Linear kinds use the exact least-squares projection. Poisson and Weibull
    kinds fit the MLE on one very large synthetic dataset (``method=
    "monte_carlo"``, 10^7 and 10^6 rows by default, with the sandwich SE as
    Monte Carlo error) or solve the population score equation numerically
    (``method="quadrature"``).
    """
    if model is not None and model != dgp.model:
        raise DataError(f"{dgp.kind} scenarios are analysed with the {dgp.model.family.value} model")
    if method not in ("monte_carlo", "quadrature"):
        raise DataError(f"unknown KL-point method {method!r}")
    if n_oracle is None:
        n_oracle = 10_000_000 if dgp.kind == "poisson_quadratic" else 1_000_000
    return _kl_cached(_oracle_key(dgp), method, int(n_oracle), int(seed))


def default_prior(dgp: DgpSpec) -> PriorSpec:
    if dgp.model.has_sigma2:
        return PriorSpec.with_precision_gamma(0.1, 0.1, beta_mean=0.0, beta_var=1e3)
    return PriorSpec(beta_mean=0.0, beta_var=1e3)


@dataclass(frozen=True)
class SimConfig:
    dgp: DgpSpec
    n_reps: int = 1000
    mcmc: McmcConfig = field(default_factory=McmcConfig.simulation)
    seed: int = 0
    level: float = 0.95
    prior: Optional[PriorSpec] = None
    kl_method: str = "monte_carlo"

    def __post_init__(self):
        if self.n_reps < 1:
            raise DataError("n_reps must be at least 1")
        if not 0 < self.level < 1:
            raise DataError("level must lie in (0, 1)")


@dataclass(frozen=True)
class ReplicateResult:
    index: int
    d_hat: float = np.nan
    post_sd: float = np.nan
    brse: float = np.nan
    mle: float = np.nan
    model_se: float = np.nan
    robust_se: float = np.nan
    covered_credible: bool = False
    covered_freq_robust: bool = False
    covered_bayes_robust: bool = False
    n_events: float = np.nan
    error: Optional[str] = None


@dataclass(frozen=True)
class SimReport:
    scenario: str
    dgp: DgpSpec
    n_reps: int
    n_failed_reps: int
    ave_d_hat: float
    se_d_hat: float
    ave_post_sd: float
    ave_brse: float
    ave_mle: float
    ave_robust_se: float
    coverage_credible: float
    coverage_freq_robust: float
    coverage_bayes_robust: float
    kl_point: float
    ave_events: Optional[float] = None
    replicates: Optional[list[ReplicateResult]] = None

    @property
    def valid(self) -> bool:
        return self.n_failed_reps <= MAX_FAILED_FRACTION * self.n_reps


def replicate_seed(cfg: SimConfig, index: int) -> np.random.SeedSequence:
    return np.random.SeedSequence([int(cfg.seed), _stable_int(cfg.dgp.scenario_id), int(index)])


def run_replicate(cfg: SimConfig, index: int, theta_star: Optional[np.ndarray] = None) -> ReplicateResult:
    """Generate, fit and summarize one replicate; numerical failures are
    captured in ``error`` rather than raised."""
    dgp = cfg.dgp
    if theta_star is None:
        theta_star = kl_point(dgp, method=cfg.kl_method).value
    target = float(theta_star[SLOPE])
    data_ss, mcmc_ss = replicate_seed(cfg, index).spawn(2)
    mcmc_seed = int(mcmc_ss.generate_state(1, np.uint64)[0])
    model = dgp.model
    prior = cfg.prior or default_prior(dgp)
    data = generate(dgp, data_ss)
    n_events = float(data.event.sum()) if data.is_survival else np.nan
    try:
        fit = fit_mle(model, data)
        sample = sample_posterior(model, prior, data, replace(cfg.mcmc, seed=mcmc_seed), fit=fit)
        res = compute_brse(model, sample, data, cfg.level)
    except BrseError as exc:
        return ReplicateResult(index, n_events=n_events, error=f"{type(exc).__name__}: {exc}")
    if not res.valid:
        return ReplicateResult(index, n_events=n_events, error=res.error)
    z = normal_quantile(0.5 + cfg.level / 2)
    mle, rse = float(fit.theta_mle[SLOPE]), float(fit.robust_se[SLOPE])
    cred = res.intervals[SLOPE].credible
    rob = res.intervals[SLOPE].robust
    return ReplicateResult(
        index=index,
        d_hat=float(res.d_hat[SLOPE]),
        post_sd=float(res.post_sd[SLOPE]),
        brse=float(res.brse[SLOPE]),
        mle=mle,
        model_se=float(fit.model_se[SLOPE]),
        robust_se=rse,
        covered_credible=cred[0] <= target <= cred[1],
        covered_freq_robust=mle - z * rse <= target <= mle + z * rse,
        covered_bayes_robust=rob[0] <= target <= rob[1],
        n_events=n_events,
    )


def aggregate(cfg: SimConfig, replicates: list[ReplicateResult], theta_star: np.ndarray,
              keep_replicates: bool = False) -> SimReport:
    """Summarize replicates in index order (independent of execution order)."""
    reps = sorted(replicates, key=lambda r: r.index)
    ok = [r for r in reps if r.error is None]

    def mean(attr):
        vals = np.array([getattr(r, attr) for r in ok], dtype=float)
        return float(np.mean(vals)) if vals.size else np.nan

    d = np.array([r.d_hat for r in ok])
    se = float(np.std(d, ddof=1)) if d.size >= 2 else np.nan
    events = None
    if cfg.dgp.kind == "weibull_ph":
        events = float(np.mean([r.n_events for r in reps]))
    return SimReport(
        scenario=cfg.dgp.scenario_id,
        dgp=cfg.dgp,
        n_reps=len(reps),
        n_failed_reps=len(reps) - len(ok),
        ave_d_hat=mean("d_hat"),
        se_d_hat=se,
        ave_post_sd=mean("post_sd"),
        ave_brse=mean("brse"),
        ave_mle=mean("mle"),
        ave_robust_se=mean("robust_se"),
        coverage_credible=mean("covered_credible"),
        coverage_freq_robust=mean("covered_freq_robust"),
        coverage_bayes_robust=mean("covered_bayes_robust"),
        kl_point=float(theta_star[SLOPE]),
        ave_events=events,
        replicates=reps if keep_replicates else None,
    )


def _worker(args):
    cfg, index, theta_star = args
    return run_replicate(cfg, index, theta_star)


def default_workers() -> int:
    try:
        return max(1, int(os.environ.get(WORKERS_ENV, "1")))
    except ValueError:
        return 1


def run_scenario(cfg: SimConfig, workers: Optional[int] = None, keep_replicates: bool = False) -> SimReport:
    """Run ``cfg.n_reps`` independent replicates and aggregate them.

    ``workers > 1`` spreads replicates over a process pool; results are
    identical to the serial run because every replicate has its own seed.
    """
    theta_star = kl_point(cfg.dgp, method=cfg.kl_method).value
    workers = default_workers() if workers is None else workers
    jobs = [(cfg, i, theta_star) for i in range(cfg.n_reps)]
    if workers > 1 and cfg.n_reps > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            reps = list(pool.map(_worker, jobs, chunksize=max(1, cfg.n_reps // (4 * workers))))
    else:
        reps = [_worker(j) for j in jobs]
    return aggregate(cfg, reps, theta_star, keep_replicates)


def run_fixed_design(cfg: SimConfig, workers: Optional[int] = None, keep_replicates: bool = False) -> SimReport:
    """As :func:`run_scenario`, with covariates held at an even grid on [0, 3]."""
    if cfg.dgp.kind != "fixed_linear_quadratic":
        raise DataError("run_fixed_design needs a fixed_linear_quadratic DGP")
    return run_scenario(cfg, workers, keep_replicates)


def _grid_linear(kind: str) -> list[DgpSpec]:
    return [DgpSpec(kind, n, a=a) for n in (50, 100) for a in (-2.0, -1.0, 0.0, 1.0, 2.0)]


def _grid_poisson() -> list[DgpSpec]:
    return [DgpSpec("poisson_quadratic", n, a=a) for n in (50, 100) for a in (-0.5, -0.25, 0.0, 0.25, 0.5)]


def _grid_weibull(law: str) -> list[DgpSpec]:
    return [
        DgpSpec("weibull_ph", n, kappa=k, beta=(0.0, b), covariate_law=law)
        for n in (50, 100) for k in (0.8, 1.0, 1.5) for b in (0.0, -0.25, -0.5)
    ]


def grid(name: str, covariate_law: str = "uniform") -> list[DgpSpec]:
    """Named scenario sets: ``table1``, ``table2``, ``table3``, ``tableS1``, ``figure1``.

    ``covariate_law`` applies to the Weibull PH scenarios only.
    """
    if name == "table1":
        return _grid_linear("linear_quadratic")
    if name == "table2":
        return _grid_poisson()
    if name == "table3":
        return _grid_weibull(covariate_law)
    if name == "tableS1":
        return _grid_linear("fixed_linear_quadratic")
    if name == "figure1":
        specs = _grid_linear("linear_quadratic") + _grid_poisson() + _grid_weibull(covariate_law)
        return [s for s in specs if s.n == 100]
    raise DataError(f"unknown grid {name!r}; choose from {GRID_NAMES}")


GRID_NAMES = ("table1", "table2", "table3", "tableS1", "figure1")
