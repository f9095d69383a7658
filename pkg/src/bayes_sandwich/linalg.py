"""Small dense linear-algebra helpers with explicit failure modes."""

from __future__ import annotations

import numpy as np
from scipy import linalg as sla

from .errors import NumericalError

MAX_CONDITION = 1e12


def cholesky(A: np.ndarray, what: str = "matrix") -> np.ndarray:
    """Lower Cholesky factor; ``NumericalError`` if ``A`` is not positive definite."""
    A = np.asarray(A, dtype=float)
    if not np.all(np.isfinite(A)):
        raise NumericalError(f"{what} has non-finite entries")
    try:
        return np.linalg.cholesky(0.5 * (A + A.T))
    except np.linalg.LinAlgError as exc:
        raise NumericalError(f"{what} is not positive definite") from exc


def logdet_pd(A: np.ndarray, what: str = "matrix") -> float:
    L = cholesky(A, what)
    return float(2.0 * np.sum(np.log(np.diag(L))))


def condition_number(A: np.ndarray) -> float:
    return float(np.linalg.cond(A))


def check_conditioning(A: np.ndarray, what: str = "matrix") -> None:
    cond = condition_number(A)
    if not np.isfinite(cond) or cond > MAX_CONDITION:
        raise NumericalError(f"{what} is singular or ill-conditioned (cond={cond:.3g})")


def solve(A: np.ndarray, b: np.ndarray, what: str = "matrix") -> np.ndarray:
    """LU solve of ``A x = b`` after a condition-number guard."""
    check_conditioning(A, what)
    return sla.solve(A, b)


def solve_pd(A: np.ndarray, b: np.ndarray, what: str = "matrix") -> np.ndarray:
    check_conditioning(A, what)
    L = cholesky(A, what)
    return sla.cho_solve((L, True), b)


def sym_pd_condition(stack: np.ndarray) -> np.ndarray:
    """Condition numbers of a stack of symmetric matrices; inf where not PD."""
    eig = np.linalg.eigvalsh(stack)
    lo, hi = eig[..., 0], eig[..., -1]
    with np.errstate(divide="ignore", invalid="ignore"):
        cond = np.where(lo > 0, hi / lo, np.inf)
    return cond
