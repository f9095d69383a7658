"""Maximum likelihood fits with model-based and HC0 sandwich standard errors."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import linalg
from .errors import ConvergenceError, DataError, NumericalError
from .models import (
    Dataset,
    Family,
    ModelSpec,
    ParamPoint,
    check_data,
    empirical_fisher,
    score_matrix,
    score_outer_mean,
)

DIVERGENCE_BOUND = 1e3
STEP_TOL = 1e-6


@dataclass(frozen=True)
class FreqFit:
    theta_mle: np.ndarray
    model_se: np.ndarray
    sandwich_cov: np.ndarray
    robust_se: np.ndarray
    converged: bool
    iterations: int
    sigma2_mle: float | None = None

    @property
    def param(self) -> ParamPoint:
        return ParamPoint(self.theta_mle, self.sigma2_mle)


def _check_estimable(data: Dataset) -> None:
    if data.n <= data.p:
        raise DataError(f"need n > p for estimation (n={data.n}, p={data.p})")
    if np.linalg.matrix_rank(data.X) < data.p:
        raise DataError("design matrix is rank deficient")


def _exp_family_terms(model: ModelSpec, data: Dataset):
    # log-likelihood kernel sum(a * eta - w * exp(eta)) for Poisson and exp_ph
    if model.family is Family.POISSON:
        return data.y, np.ones(data.n)
    return data.event, data.time


def _newton(model: ModelSpec, data: Dataset, tol: float, max_iter: int):
    a, w = _exp_family_terms(model, data)
    X = data.X
    n = data.n
    beta = np.zeros(data.p)
    intercept = np.flatnonzero(np.all(X == 1.0, axis=0))
    if intercept.size and a.sum() > 0 and w.sum() > 0:
        beta[intercept[0]] = np.log(a.sum() / w.sum())

    def loglik(b):
        eta = X @ b
        if np.any(eta > 700):
            return -np.inf
        return float(a @ eta - w @ np.exp(eta))

    ll = loglik(beta)
    for it in range(1, max_iter + 1):
        mu = w * np.exp(X @ beta)
        grad = X.T @ (a - mu)
        hess = (X * mu[:, None]).T @ X
        try:
            step = linalg.solve_pd(hess, grad, "Fisher information")
        except NumericalError as exc:
            raise ConvergenceError("Fisher information became singular (possible separation)") from exc
        # a tiny score alone is not enough: under separation the score vanishes
        # while the coefficients keep moving by O(1) per step
        if np.max(np.abs(grad)) / n < tol and np.max(np.abs(step)) < STEP_TOL * (1.0 + np.max(np.abs(beta))):
            return beta, it - 1, True
        t = 1.0
        # inside the quadratic region the log-likelihood gain can be below its
        # rounding error, so the full step is taken without a line search
        quadratic = float(grad @ step) < 1e-10 * (1.0 + abs(ll))
        while not quadratic:
            cand = beta + t * step
            ll_cand = loglik(cand)
            if ll_cand >= ll or t < 1e-10:
                break
            t *= 0.5
        if quadratic:
            cand = beta + step
            ll_cand = loglik(cand)
        if not np.isfinite(ll_cand):
            raise ConvergenceError("Newton step left the finite likelihood region")
        if np.max(np.abs(cand - beta)) <= 1e-14 * (1.0 + np.max(np.abs(beta))):
            # floating-point floor: the score cannot be reduced further
            beta = cand
            mu = w * np.exp(X @ beta)
            grad = X.T @ (a - mu)
            return beta, it, bool(np.max(np.abs(grad)) / n < max(tol, 1e-6))
        beta, ll = cand, ll_cand
        if np.linalg.norm(beta) > DIVERGENCE_BOUND:
            raise ConvergenceError("coefficients diverged (possible separation)")
    mu = w * np.exp(X @ beta)
    grad = X.T @ (a - mu)
    return beta, max_iter, bool(np.max(np.abs(grad)) / n < tol)


def fit_mle(model: ModelSpec, data: Dataset, tol: float = 1e-8, max_iter: int = 100) -> FreqFit:
    """Maximum likelihood fit plus model-based and HC0 robust standard errors.

    The linear model is solved by least squares with ``sigma2 = RSS / n``;
    Poisson and exponential PH use Newton iterations with step halving.
    Raises ``ConvergenceError`` when ``max_iter`` is exhausted.
    """
    check_data(model, data)
    _check_estimable(data)
    fam = model.family
    sigma2 = None
    if fam is Family.NORMAL_MEAN:
        beta = np.array([data.y.mean()])
        iterations, converged = 0, True
    elif fam is Family.LINEAR:
        beta, *_ = np.linalg.lstsq(data.X, data.y, rcond=None)
        resid = data.y - data.X @ beta
        sigma2 = float(resid @ resid / data.n)
        if sigma2 <= 0:
            raise NumericalError("zero residual variance; the linear fit is exact")
        iterations, converged = 0, True
    else:
        beta, iterations, converged = _newton(model, data, tol, max_iter)
        if not converged:
            raise ConvergenceError(f"Newton did not converge in {max_iter} iterations")
    theta = ParamPoint(beta, sigma2)
    fisher = empirical_fisher(model, theta, data)
    model_cov = linalg.solve_pd(fisher, np.eye(data.p), "Fisher information") / data.n
    sand = _sandwich_at(model, theta, data)
    return FreqFit(
        theta_mle=beta,
        model_se=np.sqrt(np.diag(model_cov)),
        sandwich_cov=sand,
        robust_se=np.sqrt(np.diag(sand)),
        converged=converged,
        iterations=iterations,
        sigma2_mle=sigma2,
    )


def _sandwich_at(model: ModelSpec, theta: ParamPoint, data: Dataset) -> np.ndarray:
    fisher = empirical_fisher(model, theta, data)
    meat = score_outer_mean(model, theta, data)
    half = linalg.solve(fisher, meat, "Fisher information")  # I^-1 M
    cov = linalg.solve(fisher, half.T, "Fisher information") / data.n  # I^-1 M I^-1
    return 0.5 * (cov + cov.T)


def sandwich(model: ModelSpec, fit: FreqFit, data: Dataset) -> np.ndarray:
    """HC0 estimate of Var(theta_hat): ``(1/n) I^-1 [(1/n) sum s s'] I^-1``."""
    if not fit.converged:
        raise ConvergenceError("sandwich needs a converged fit")
    return _sandwich_at(model, fit.param, data)


def mean_score(model: ModelSpec, fit: FreqFit, data: Dataset) -> np.ndarray:
    return score_matrix(model, fit.param, data).mean(axis=0)
