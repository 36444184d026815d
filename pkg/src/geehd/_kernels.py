"""Hot accumulation kernels: numba-jitted with a pure-numpy fallback.

Every kernel exists twice: a ``*_numpy`` reference implementation (batched
numpy) and an ``@njit`` version compiled on first use.  The active set is
chosen at import time; set the environment variable ``GEEHD_NO_NUMBA=1`` to
force the numpy path (useful for debugging and for the benchmark in
``benchmarks/bench_kernels.py``).

Array contracts: float64, C-contiguous.  ``Y``/``mu``/``sq`` are (g, m),
``X`` is (g, m, p), ``Rinv`` is (m, m) symmetric.  ``sq`` holds the square
roots of the marginal variances.
"""

from __future__ import annotations

import math
import os

import numpy as np

_FLAG = os.environ.get("GEEHD_NO_NUMBA", "").strip()
NUMBA_DISABLED = _FLAG not in ("", "0")

try:
    from numba import njit

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover
    HAVE_NUMBA = False

USE_NUMBA = HAVE_NUMBA and not NUMBA_DISABLED


def active_backend():
    return "numba" if USE_NUMBA else "numpy"


# ---------------------------------------------------------------------------
# numpy reference implementations


def score_info_numpy(Y, X, mu, sq, Rinv):
    """Score vector and weighted information, summed over clusters."""
    g, m, p = X.shape
    eps = (Y - mu) / sq
    w = eps @ Rinv
    t = (sq * w).reshape(g * m)
    Xf = X.reshape(g * m, p)
    score = Xf.T @ t
    G = sq[:, :, None] * X
    B = np.matmul(Rinv, G)
    H = np.tensordot(G.reshape(g * m, p), B.reshape(g * m, p), axes=(0, 0))
    H = 0.5 * (H + H.T)
    return score, H


def score_only_numpy(Y, X, mu, sq, Rinv):
    """Score vector alone; skips the quadratic information accumulation."""
    g, m, p = X.shape
    eps = (Y - mu) / sq
    t = (sq * (eps @ Rinv)).reshape(g * m)
    return X.reshape(g * m, p).T @ t


def middle_matrix_numpy(Y, X, mu, sq, Rinv):
    """Sum of outer products of per-cluster weighted score contributions."""
    g, m, p = X.shape
    eps = (Y - mu) / sq
    w = eps @ Rinv
    G = sq[:, :, None] * X
    gvec = np.matmul(w[:, None, :], G)[:, 0, :]
    M = gvec.T @ gvec
    return 0.5 * (M + M.T)


def jacobian_extra_numpy(Y, X, mu, sq, cratio, Rinv):
    """Residual-weighted correction terms of the exact score Jacobian.

    Returns the (generally nonsymmetric) matrix to add to the information so
    that the total equals minus the analytic derivative of the score.
    ``cratio`` holds the second mean derivative divided by the variance,
    evaluated at the linear predictor.
    """
    g, m, p = X.shape
    eps = (Y - mu) / sq
    w = eps @ Rinv
    G = sq[:, :, None] * X
    B = np.matmul(Rinv, G)
    Xf = X.reshape(g * m, p)
    u = (cratio * eps)[:, :, None] * X
    E = 0.5 * np.tensordot(B.reshape(g * m, p), u.reshape(g * m, p), axes=(0, 0))
    gw = (cratio * sq * w)[:, :, None] * X
    F = -0.5 * np.tensordot(gw.reshape(g * m, p), Xf, axes=(0, 0))
    return E + F


def ar1_path_numpy(z, rho, scale):
    """Stationary AR(1) recursion applied along the last axis of ``z``."""
    x = np.empty_like(z)
    x[:, 0] = scale * z[:, 0]
    c = scale * math.sqrt(1.0 - rho * rho)
    for k in range(1, z.shape[1]):
        x[:, k] = rho * x[:, k - 1] + c * z[:, k]
    return x


def bahadur_cells_numpy(pi, rho, outcomes):
    """Second-order correlated-binary pmf cells for all outcomes."""
    base = np.prod(np.where(outcomes == 1.0, pi, 1.0 - pi), axis=1)
    e = (outcomes - pi) / np.sqrt(pi * (1.0 - pi))
    rowsum = e.sum(axis=1)
    pair = 0.5 * (rowsum * rowsum - (e * e).sum(axis=1))
    return base * (1.0 + rho * pair)


def _logit_probs_numpy(x, beta):
    theta = x @ beta
    pi = np.empty_like(theta)
    pos = theta >= 0
    pi[pos] = 1.0 / (1.0 + np.exp(-theta[pos]))
    ez = np.exp(theta[~pos])
    pi[~pos] = ez / (1.0 + ez)
    return pi


def logit_bahadur_cells_numpy(x, beta, rho, outcomes):
    return bahadur_cells_numpy(_logit_probs_numpy(x, beta), rho, outcomes)


def logit_bahadur_parts_numpy(x, beta, outcomes):
    """Base probabilities and pairwise-correction weights per outcome."""
    pi = _logit_probs_numpy(x, beta)
    base = np.prod(np.where(outcomes == 1.0, pi, 1.0 - pi), axis=1)
    e = (outcomes - pi) / np.sqrt(pi * (1.0 - pi))
    rowsum = e.sum(axis=1)
    pair = 0.5 * (rowsum * rowsum - (e * e).sum(axis=1))
    return base, pair


def chol_lower_numpy(A, tiny):
    """Lower Cholesky factor; returns (L, -1) or (partial, failing index)."""
    n = A.shape[0]
    L = np.zeros_like(A)
    for j in range(n):
        d = A[j, j] - L[j, :j] @ L[j, :j]
        if d <= tiny:
            return L, j
        L[j, j] = math.sqrt(d)
        if j + 1 < n:
            L[j + 1 :, j] = (A[j + 1 :, j] - L[j + 1 :, :j] @ L[j, :j]) / L[j, j]
    return L, -1


# ---------------------------------------------------------------------------
# numba versions

if HAVE_NUMBA:

    @njit(cache=True)
    def _score_info_nb(Y, X, mu, sq, Rinv):
        # fused per-cluster weights, one BLAS call for the Gram accumulation
        g, m, p = X.shape
        score = np.zeros(p)
        G = np.empty((g * m, p))
        B = np.empty((g * m, p))
        w = np.empty(m)
        for i in range(g):
            for j in range(m):
                acc = 0.0
                for k in range(m):
                    acc += Rinv[j, k] * (Y[i, k] - mu[i, k]) / sq[i, k]
                w[j] = acc
            for j in range(m):
                row = i * m + j
                tj = sq[i, j] * w[j]
                for a in range(p):
                    xa = X[i, j, a]
                    score[a] += xa * tj
                    G[row, a] = sq[i, j] * xa
                    acc = 0.0
                    for k in range(m):
                        acc += Rinv[j, k] * sq[i, k] * X[i, k, a]
                    B[row, a] = acc
        H = np.dot(G.T, B)
        for a in range(p):
            for b in range(a + 1, p):
                s = 0.5 * (H[a, b] + H[b, a])
                H[a, b] = s
                H[b, a] = s
        return score, H

    @njit(cache=True)
    def _score_only_nb(Y, X, mu, sq, Rinv):
        g, m, p = X.shape
        score = np.zeros(p)
        w = np.empty(m)
        for i in range(g):
            for j in range(m):
                acc = 0.0
                for k in range(m):
                    acc += Rinv[j, k] * (Y[i, k] - mu[i, k]) / sq[i, k]
                w[j] = acc
            for j in range(m):
                tj = sq[i, j] * w[j]
                for a in range(p):
                    score[a] += X[i, j, a] * tj
        return score

    @njit(cache=True)
    def _middle_matrix_nb(Y, X, mu, sq, Rinv):
        g, m, p = X.shape
        M = np.zeros((p, p))
        w = np.empty(m)
        gv = np.empty(p)
        for i in range(g):
            for j in range(m):
                acc = 0.0
                for k in range(m):
                    acc += Rinv[j, k] * (Y[i, k] - mu[i, k]) / sq[i, k]
                w[j] = acc
            for a in range(p):
                acc = 0.0
                for j in range(m):
                    acc += sq[i, j] * w[j] * X[i, j, a]
                gv[a] = acc
            for a in range(p):
                for b in range(a, p):
                    M[a, b] += gv[a] * gv[b]
        for a in range(p):
            for b in range(a + 1, p):
                M[b, a] = M[a, b]
        return M

    @njit(cache=True)
    def _jacobian_extra_nb(Y, X, mu, sq, cratio, Rinv):
        g, m, p = X.shape
        D = np.zeros((p, p))
        w = np.empty(m)
        eps = np.empty(m)
        bcol = np.empty(p)
        for i in range(g):
            for j in range(m):
                eps[j] = (Y[i, j] - mu[i, j]) / sq[i, j]
            for j in range(m):
                acc = 0.0
                for k in range(m):
                    acc += Rinv[j, k] * eps[k]
                w[j] = acc
            for j in range(m):
                # column j of (A^{1/2} X)^T Rinv
                for a in range(p):
                    acc = 0.0
                    for k in range(m):
                        acc += sq[i, k] * X[i, k, a] * Rinv[k, j]
                    bcol[a] = acc
                uj = 0.5 * cratio[i, j] * eps[j]
                vj = -0.5 * cratio[i, j] * sq[i, j] * w[j]
                for a in range(p):
                    for b in range(p):
                        D[a, b] += uj * bcol[a] * X[i, j, b] + vj * X[i, j, a] * X[i, j, b]
        return D

    @njit(cache=True)
    def _ar1_path_nb(z, rho, scale):
        m, p = z.shape
        x = np.empty_like(z)
        c = scale * math.sqrt(1.0 - rho * rho)
        for r in range(m):
            x[r, 0] = scale * z[r, 0]
            for k in range(1, p):
                x[r, k] = rho * x[r, k - 1] + c * z[r, k]
        return x

    @njit(cache=True)
    def _bahadur_cells_nb(pi, rho, outcomes):
        q, m = outcomes.shape
        cells = np.empty(q)
        e = np.empty(m)
        for r in range(q):
            base = 1.0
            for j in range(m):
                if outcomes[r, j] == 1.0:
                    base *= pi[j]
                else:
                    base *= 1.0 - pi[j]
                e[j] = (outcomes[r, j] - pi[j]) / math.sqrt(pi[j] * (1.0 - pi[j]))
            pair = 0.0
            for j in range(m):
                for k in range(j + 1, m):
                    pair += e[j] * e[k]
            cells[r] = base * (1.0 + rho * pair)
        return cells

    @njit(cache=True)
    def _logit_probs_nb(x, beta):
        m, p = x.shape
        pi = np.empty(m)
        for j in range(m):
            t = 0.0
            for a in range(p):
                t += x[j, a] * beta[a]
            if t >= 0.0:
                pi[j] = 1.0 / (1.0 + math.exp(-t))
            else:
                ez = math.exp(t)
                pi[j] = ez / (1.0 + ez)
        return pi

    @njit(cache=True)
    def _logit_bahadur_cells_nb(x, beta, rho, outcomes):
        return _bahadur_cells_nb(_logit_probs_nb(x, beta), rho, outcomes)

    @njit(cache=True)
    def _logit_bahadur_parts_nb(x, beta, outcomes):
        pi = _logit_probs_nb(x, beta)
        q, m = outcomes.shape
        base = np.empty(q)
        pair = np.empty(q)
        e = np.empty(m)
        for r in range(q):
            b = 1.0
            for j in range(m):
                if outcomes[r, j] == 1.0:
                    b *= pi[j]
                else:
                    b *= 1.0 - pi[j]
                e[j] = (outcomes[r, j] - pi[j]) / math.sqrt(pi[j] * (1.0 - pi[j]))
            s = 0.0
            for j in range(m):
                for k in range(j + 1, m):
                    s += e[j] * e[k]
            base[r] = b
            pair[r] = s
        return base, pair

    @njit(cache=True)
    def _chol_lower_nb(A, tiny):
        n = A.shape[0]
        L = np.zeros((n, n))
        for j in range(n):
            d = A[j, j]
            for k in range(j):
                d -= L[j, k] * L[j, k]
            if d <= tiny:
                return L, j
            L[j, j] = math.sqrt(d)
            for r in range(j + 1, n):
                s = A[r, j]
                for k in range(j):
                    s -= L[r, k] * L[j, k]
                L[r, j] = s / L[j, j]
        return L, -1


if USE_NUMBA:
    score_info = _score_info_nb
    score_only = _score_only_nb
    middle_matrix = _middle_matrix_nb
    jacobian_extra = _jacobian_extra_nb
    ar1_path = _ar1_path_nb
    bahadur_cells = _bahadur_cells_nb
    logit_bahadur_cells = _logit_bahadur_cells_nb
    logit_bahadur_parts = _logit_bahadur_parts_nb
    chol_lower = _chol_lower_nb
else:
    score_info = score_info_numpy
    score_only = score_only_numpy
    middle_matrix = middle_matrix_numpy
    jacobian_extra = jacobian_extra_numpy
    ar1_path = ar1_path_numpy
    bahadur_cells = bahadur_cells_numpy
    logit_bahadur_cells = logit_bahadur_cells_numpy
    logit_bahadur_parts = logit_bahadur_parts_numpy
    chol_lower = chol_lower_numpy
