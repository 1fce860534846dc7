"""Compiled kernels for weighted-L1 penalized canonical GLMs.

The objective is ``loss(theta)/n + sum_j pen_j |theta_j|`` with
``loss = RSS/2`` (identity link) or the Bernoulli negative log-likelihood
(logit link). Unpenalized coordinates carry ``pen_j = 0``.
"""

import numpy as np
from numba import njit

STATUS_OK = 0
STATUS_MAXITER = 1
STATUS_DIVERGED = 2


@njit(cache=True)
def soft_threshold(x, t):
    if x > t:
        return x - t
    if x < -t:
        return x + t
    return 0.0


@njit(cache=True)
def cd_quadratic(G, b, pen, theta, tol, max_sweeps):
    """Cyclic coordinate descent on ``0.5 t'Gt - b't + sum pen|t|``, in place.

    Stops when the largest coordinate change in a sweep is below ``tol``.
    Returns the number of sweeps.
    """
    k = b.shape[0]
    for sweep in range(1, max_sweeps + 1):
        max_delta = 0.0
        for j in range(k):
            old = theta[j]
            r = b[j]
            for l in range(k):
                if l != j:
                    r -= G[j, l] * theta[l]
            if pen[j] > 0.0:
                new = soft_threshold(r, pen[j]) / G[j, j]
            else:
                new = r / G[j, j]
            theta[j] = new
            delta = abs(new - old)
            if delta > max_delta:
                max_delta = delta
        if max_delta < tol:
            return sweep
    return max_sweeps


@njit(cache=True)
def _logistic_loss(eta, y):
    s = 0.0
    for i in range(eta.shape[0]):
        e = eta[i]
        if e > 0:
            s += e + np.log1p(np.exp(-e)) - y[i] * e
        else:
            s += np.log1p(np.exp(e)) - y[i] * e
    return s


@njit(cache=True)
def _penalty(theta, pen):
    s = 0.0
    for j in range(theta.shape[0]):
        s += pen[j] * abs(theta[j])
    return s


@njit(cache=True)
def _weighted_gram(D, w, n_scale):
    Dw = D * w.reshape(-1, 1)
    return (Dw.T @ D) / n_scale


@njit(cache=True)
def solve_path(D, y, logistic, pen_w, lambdas, theta0, inner_tol, outer_tol, max_outer,
               max_sweeps, bound):
    """Warm-started solutions along a decreasing ``lambdas`` grid.

    Returns ``(coefs, status, n_outer)``; rows of ``coefs`` after a diverged or
    non-converged solve are NaN.
    """
    n, k = D.shape
    L = lambdas.shape[0]
    coefs = np.full((L, k), np.nan)
    status = np.zeros(L, dtype=np.int64)
    n_outer = np.zeros(L, dtype=np.int64)
    theta = theta0.copy()
    pen = np.empty(k)

    if not logistic:
        w1 = np.ones(n)
        G = _weighted_gram(D, w1, float(n))
        b = (D.T @ y) / n
        for l in range(L):
            for j in range(k):
                pen[j] = lambdas[l] * pen_w[j]
            sweeps = cd_quadratic(G, b, pen, theta, inner_tol, max_sweeps)
            n_outer[l] = 1
            if sweeps >= max_sweeps:
                status[l:] = STATUS_MAXITER
                break
            coefs[l, :] = theta
        return coefs, status, n_outer

    eta = D @ theta
    for l in range(L):
        for j in range(k):
            pen[j] = lambdas[l] * pen_w[j]
        obj = _logistic_loss(eta, y) / n + _penalty(theta, pen)
        ok = False
        for it in range(1, max_outer + 1):
            mu = np.empty(n)
            w = np.empty(n)
            for i in range(n):
                m = 1.0 / (1.0 + np.exp(-eta[i]))
                mu[i] = m
                w[i] = max(m * (1.0 - m), 1e-12)
            G = _weighted_gram(D, w, float(n))
            b = G @ theta + (D.T @ (y - mu)) / n
            new = theta.copy()
            cd_quadratic(G, b, pen, new, inner_tol, max_sweeps)
            t = 1.0
            while True:
                cand = theta + t * (new - theta)
                eta_c = D @ cand
                obj_c = _logistic_loss(eta_c, y) / n + _penalty(cand, pen)
                if obj_c <= obj + 1e-15 * abs(obj) or t < 1e-8:
                    break
                t *= 0.5
            dmax = np.max(np.abs(cand - theta))
            rel = abs(obj - obj_c) / (abs(obj_c) + 0.1)
            theta = cand
            eta = eta_c
            obj = min(obj, obj_c)
            n_outer[l] = it
            if np.max(np.abs(theta)) > bound:
                status[l:] = STATUS_DIVERGED
                return coefs, status, n_outer
            if rel < outer_tol and dmax < 1e-8:
                ok = True
                break
        if not ok:
            status[l:] = STATUS_MAXITER
            return coefs, status, n_outer
        coefs[l, :] = theta
    return coefs, status, n_outer
