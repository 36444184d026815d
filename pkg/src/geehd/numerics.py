"""Dense symmetric positive-definite linear algebra shared by estimation and inference.

Systems here are small (p up to a few dozen), so everything is dense and
factored once via Cholesky.  Failure is reported, never repaired: a
nonpositive pivot means the matrix is not positive definite, which callers
treat as a violated regularity condition.
"""

from __future__ import annotations

import numpy as np
from scipy.linalg import solve_triangular

from . import _kernels

PIVOT_TOL = 1e-12


class NotSpdError(np.linalg.LinAlgError):
    """Symmetric factorization hit a nonpositive pivot."""

    def __init__(self, pivot_index, pivot_value=None):
        self.pivot_index = int(pivot_index)
        self.pivot_value = pivot_value
        msg = f"matrix is not positive definite (pivot {pivot_index}"
        if pivot_value is not None:
            msg += f" = {pivot_value:.3e}"
        super().__init__(msg + ")")


def symmetrize(A):
    """Average a nearly-symmetric matrix with its transpose."""
    A = np.asarray(A, dtype=np.float64)
    return 0.5 * (A + A.T)


def _check_square_symmetric(A):
    A = np.ascontiguousarray(A, dtype=np.float64)
    if A.ndim != 2 or A.shape[0] != A.shape[1]:
        raise ValueError(f"expected a square matrix, got shape {A.shape}")
    if not np.allclose(A, A.T, rtol=0.0, atol=1e-8 * (1.0 + np.abs(A).max())):
        raise ValueError("matrix is not symmetric")
    return symmetrize(A)


class SpdFactor:
    """Cholesky factor of an SPD matrix, reusable for many solves."""

    def __init__(self, A):
        A = _check_square_symmetric(A)
        L, pivot = _kernels.chol_lower(A, PIVOT_TOL)
        if pivot >= 0:
            raise NotSpdError(pivot, float(A[pivot, pivot]))
        self.L = L
        self.dim = A.shape[0]

    def solve(self, b):
        b = np.asarray(b, dtype=np.float64)
        y = solve_triangular(self.L, b, lower=True)
        return solve_triangular(self.L.T, y, lower=False)

    def inverse(self):
        return self.solve(np.eye(self.dim))

    def logdet(self):
        return 2.0 * np.sum(np.log(np.diag(self.L)))


def solve_spd(A, b):
    """Solve A x = b for symmetric positive definite A."""
    return SpdFactor(A).solve(b)


def invert_spd(A):
    """Inverse of a symmetric positive definite matrix, exactly symmetric."""
    return symmetrize(SpdFactor(A).inverse())


def eigen_extremes(A):
    """Smallest and largest eigenvalue of a symmetric matrix."""
    A = _check_square_symmetric(A)
    w = np.linalg.eigvalsh(A)
    return float(w[0]), float(w[-1])
