"""MCMC convergence diagnostics: split R-hat, effective sample size, and
batch-means Monte Carlo standard errors."""

from __future__ import annotations

import numpy as np


def _as_chains(chains) -> np.ndarray:
    arr = np.asarray(chains, dtype=float)
    if arr.ndim == 1:
        arr = arr[None, :]
    if arr.ndim != 2:
        raise ValueError("chains must have shape (n_chains, n_draws)")
    return arr


def _split(chains: np.ndarray) -> np.ndarray:
    m, n = chains.shape
    half = n // 2
    if half < 2:
        raise ValueError("need at least 4 draws per chain")
    return np.concatenate([chains[:, :half], chains[:, n - half:]], axis=0)


def split_rhat(chains) -> float:
    """Potential scale reduction computed on half-chains.

    Returns 1.0 for a constant sample, where the statistic is undefined.
    """
    sc = _split(_as_chains(chains))
    m, n = sc.shape
    W = sc.var(axis=1, ddof=1).mean()
    B = n * sc.mean(axis=1).var(ddof=1)
    if W <= 0:
        return 1.0
    var_plus = (n - 1) / n * W + B / n
    return float(np.sqrt(var_plus / W))


def _autocov(x: np.ndarray) -> np.ndarray:
    n = x.shape[-1]
    xc = x - x.mean(axis=-1, keepdims=True)
    size = 2 ** int(np.ceil(np.log2(2 * n)))
    f = np.fft.rfft(xc, n=size, axis=-1)
    acov = np.fft.irfft(f * np.conj(f), n=size, axis=-1)[..., :n]
    return acov / n


def effective_sample_size(chains) -> float:
    """Multi-chain ESS with Geyer's initial positive (monotone) sequence."""
    ch = _as_chains(chains)
    m, n = ch.shape
    if n < 4:
        return float(m * n)
    acov = _autocov(ch)
    W = (acov[:, 0] * n / (n - 1)).mean()
    if W <= 0:
        return float(m * n)
    B_over_n = ch.mean(axis=1).var(ddof=1) if m > 1 else 0.0
    var_plus = (n - 1) / n * W + B_over_n
    rho = 1.0 - (W - acov.mean(axis=0)) / var_plus
    rho[0] = 1.0
    # pair sums Gamma_k = rho_{2k} + rho_{2k+1}, truncated at first non-positive
    n_pairs = (n - 1) // 2
    pairs = rho[0: 2 * n_pairs: 2] + rho[1: 2 * n_pairs: 2]
    total = 0.0
    prev = np.inf
    for g in pairs:
        if g <= 0:
            break
        g = min(g, prev)
        total += g
        prev = g
    tau = -1.0 + 2.0 * total
    tau = max(tau, 1.0 / np.log10(m * n + 10))
    return float(m * n / tau)


def batch_means_se(values, n_batches: int = 20, statistic=np.mean) -> float:
    """Monte Carlo standard error of ``statistic`` via non-overlapping batches.

    ``values`` is indexed by draw along axis 0; ``statistic`` maps a batch to a
    scalar.
    """
    values = np.asarray(values)
    S = values.shape[0]
    size = S // n_batches
    if size < 1:
        raise ValueError("too few draws for the requested number of batches")
    stats = np.array([statistic(values[b * size:(b + 1) * size]) for b in range(n_batches)])
    return float(stats.std(ddof=1) / np.sqrt(n_batches))
