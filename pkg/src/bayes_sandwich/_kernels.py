"""Compiled inner loops for the samplers.

All random variates are drawn by the caller from a numpy ``Generator`` and
passed in, so the kernels are deterministic functions of their inputs.
"""

import numpy as np
from numba import njit

_ETA_MAX = 700.0


@njit(cache=True)
def _forward(L, b):
    p = L.shape[0]
    x = np.empty(p)
    for i in range(p):
        s = b[i]
        for k in range(i):
            s -= L[i, k] * x[k]
        x[i] = s / L[i, i]
    return x


@njit(cache=True)
def _backward_t(L, b):
    # solves L' x = b
    p = L.shape[0]
    x = np.empty(p)
    for i in range(p - 1, -1, -1):
        s = b[i]
        for k in range(i + 1, p):
            s -= L[k, i] * x[k]
        x[i] = s / L[i, i]
    return x


@njit(cache=True)
def _chol(A):
    p = A.shape[0]
    L = np.zeros((p, p))
    for j in range(p):
        s = A[j, j]
        for k in range(j):
            s -= L[j, k] * L[j, k]
        if s <= 0.0:
            return L, False
        L[j, j] = np.sqrt(s)
        for i in range(j + 1, p):
            t = A[i, j]
            for k in range(j):
                t -= L[i, k] * L[j, k]
            L[i, j] = t / L[j, j]
    return L, True


@njit(cache=True)
def gibbs_linear(X, y, XtX, Xty, prior_prec, prior_prec_mean, rate0,
                 sigma2_init, z, gam, betas_out, sigma2_out):
    """Two-block Gibbs sampler for the normal linear model.

    beta | sigma2 ~ N(P^-1 (X'y / sigma2 + prior_prec * prior_mean), P^-1),
        P = X'X / sigma2 + diag(prior_prec)
    sigma2 | beta ~ InvGamma(shape, rate0 + RSS/2), drawn as rate / gam[t]
        with gam[t] ~ Gamma(shape, 1) supplied by the caller.

    Returns False if a precision matrix failed to factor.
    """
    n, p = X.shape
    s2 = sigma2_init
    P = np.empty((p, p))
    rhs = np.empty(p)
    for t in range(z.shape[0]):
        for i in range(p):
            for j in range(p):
                P[i, j] = XtX[i, j] / s2
            P[i, i] += prior_prec[i]
            rhs[i] = Xty[i] / s2 + prior_prec_mean[i]
        L, ok = _chol(P)
        if not ok:
            return False
        mean = _backward_t(L, _forward(L, rhs))
        dev = _backward_t(L, z[t])
        rss = 0.0
        for i in range(n):
            r = y[i]
            for j in range(p):
                r -= X[i, j] * (mean[j] + dev[j])
            rss += r * r
        s2 = (rate0 + 0.5 * rss) / gam[t]
        for j in range(p):
            betas_out[t, j] = mean[j] + dev[j]
        sigma2_out[t] = s2
    return True


@njit(cache=True)
def log_post_expfam(X, a, w, prior_mean, prior_prec, beta):
    """sum(a * eta - w * exp(eta)) plus an independent normal log prior.

    Covers Poisson (a = y, w = 1) and exponential PH (a = event, w = time),
    up to beta-free constants. Returns -inf when exp(eta) would overflow.
    """
    n, p = X.shape
    total = 0.0
    for i in range(n):
        eta = 0.0
        for j in range(p):
            eta += X[i, j] * beta[j]
        if eta > _ETA_MAX or eta < -_ETA_MAX:
            return -np.inf
        total += a[i] * eta - w[i] * np.exp(eta)
    for j in range(p):
        d = beta[j] - prior_mean[j]
        total -= 0.5 * prior_prec[j] * d * d
    return total


@njit(cache=True)
def rwm_expfam(X, a, w, prior_mean, prior_prec, beta0, logp0, chol, z, logu, out):
    """Random-walk Metropolis with a fixed Gaussian proposal ``chol @ z[t]``.

    Writes the state after each step to ``out``; returns the final state, its
    log posterior and the number of accepted proposals.
    """
    p = beta0.shape[0]
    beta = beta0.copy()
    prop = np.empty(p)
    logp = logp0
    accepted = 0
    for t in range(z.shape[0]):
        for i in range(p):
            s = 0.0
            for k in range(i + 1):
                s += chol[i, k] * z[t, k]
            prop[i] = beta[i] + s
        lp = log_post_expfam(X, a, w, prior_mean, prior_prec, prop)
        if logu[t] < lp - logp:
            for i in range(p):
                beta[i] = prop[i]
            logp = lp
            accepted += 1
        for i in range(p):
            out[t, i] = beta[i]
    return beta, logp, accepted
