"""Working correlation structures and residual-based moment estimators.

The structures act as weight matrices in the estimating equations; the
estimator stays consistent even when they are wrong.  Moment estimates of
the nuisance parameters are clamped into the open validity region so the
materialized matrix is always invertible.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .model import ClusteredDataset, MarginalModel
from .numerics import NotSpdError, SpdFactor, symmetrize

CLAMP_MARGIN = 1e-6
DIAG_SANITY_BAND = (0.5, 2.0)


class SingularCorrelationError(np.linalg.LinAlgError):
    """Working correlation matrix is not positive definite."""

    def __init__(self, pivot_index, pivot_value):
        self.pivot_index = pivot_index
        self.pivot_value = pivot_value
        super().__init__(
            f"correlation matrix not positive definite "
            f"(pivot {pivot_index} = {pivot_value:.3e})"
        )


@dataclass(frozen=True)
class Independence:
    kind = "independence"

    def matrix(self, m):
        _check_m(m)
        return np.eye(m)


@dataclass(frozen=True)
class Exchangeable:
    tau: float
    kind = "exchangeable"

    def matrix(self, m):
        _check_m(m)
        if m > 1 and not (-1.0 / (m - 1) < self.tau < 1.0):
            raise ValueError(
                f"exchangeable tau={self.tau} outside (-1/{m - 1}, 1) for m={m}"
            )
        R = np.full((m, m), float(self.tau))
        np.fill_diagonal(R, 1.0)
        return R


@dataclass(frozen=True)
class AutoRegressive1:
    tau: float
    kind = "ar1"

    def __post_init__(self):
        if not abs(self.tau) < 1.0:
            raise ValueError(f"AR-1 tau={self.tau} must satisfy |tau| < 1")

    def matrix(self, m):
        _check_m(m)
        idx = np.arange(m)
        return float(self.tau) ** np.abs(idx[:, None] - idx[None, :])


class Unstructured:
    kind = "unstructured"

    def __init__(self, R):
        R = np.ascontiguousarray(R, dtype=np.float64)
        if R.ndim != 2 or R.shape[0] != R.shape[1]:
            raise ValueError("unstructured correlation must be a square matrix")
        if not np.allclose(R, R.T, rtol=0.0, atol=1e-10 * (1.0 + np.abs(R).max())):
            raise ValueError("unstructured correlation must be symmetric")
        R = symmetrize(R)
        d = np.diag(R)
        lo, hi = DIAG_SANITY_BAND
        if (d < lo).any() or (d > hi).any():
            warnings.warn(
                f"unstructured correlation diagonal outside [{lo}, {hi}] "
                f"(range {d.min():.3f}..{d.max():.3f})",
                stacklevel=2,
            )
        self.R = R

    @property
    def tau(self):
        return None

    def matrix(self, m):
        _check_m(m)
        if m != self.R.shape[0]:
            raise ValueError(
                f"unstructured correlation has dimension {self.R.shape[0]}, requested {m}"
            )
        return self.R.copy()

    def __repr__(self):
        return f"Unstructured(m={self.R.shape[0]})"


STRUCTURE_KINDS = ("independence", "exchangeable", "ar1", "unstructured")


def _check_m(m):
    if not (isinstance(m, (int, np.integer)) and m >= 1):
        raise ValueError(f"cluster size must be a positive integer, got {m!r}")


def correlation_matrix(structure, m):
    """Materialize the m x m working correlation for a structure."""
    return structure.matrix(m)


def inverse_correlation(R):
    """Inverse of a symmetric positive definite correlation matrix."""
    try:
        return SpdFactor(R).inverse()
    except NotSpdError as err:
        raise SingularCorrelationError(err.pivot_index, err.pivot_value) from None


@dataclass(frozen=True)
class CorrelationEstimate:
    structure: object
    sample_size_used: int
    condition_number: float


def estimate_unstructured(
    data: ClusteredDataset,
    model: MarginalModel,
    beta,
    normalize: bool = False,
) -> CorrelationEstimate:
    """Moment estimate of a fully unstructured working correlation.

    Averages the outer products of the per-cluster standardized residual
    vectors evaluated at a preliminary coefficient estimate.  The raw average
    is returned by default; ``normalize=True`` rescales it to unit diagonal.
    """
    if data.m_common is None:
        raise ValueError("unstructured correlation requires a common cluster size")
    eps = _stacked_residuals(data, model, beta)
    R = eps.T @ eps / data.n
    if not np.any(np.abs(R) > 0.0):
        raise ValueError("degenerate residuals: all standardized residuals are zero")
    if normalize:
        d = np.sqrt(np.diag(R))
        R = R / np.outer(d, d)
    R = symmetrize(R)
    w = np.linalg.eigvalsh(R)
    cond = float(w[-1] / w[0]) if w[0] > 0 else float("inf")
    return CorrelationEstimate(Unstructured(R), data.n, cond)


def estimate_exchangeable_tau(residuals) -> float:
    """Average of within-cluster pairwise residual products, clamped to validity."""
    num, pairs, m_max = 0.0, 0.0, 0
    for eps in residuals:
        eps = np.asarray(eps, dtype=np.float64)
        mi = eps.shape[0]
        if mi < 2:
            raise ValueError("exchangeable estimation needs cluster sizes >= 2")
        s = eps.sum()
        num += 0.5 * (s * s - (eps * eps).sum())
        pairs += mi * (mi - 1) / 2.0
        m_max = max(m_max, mi)
    if pairs == 0.0:
        raise ValueError("no residual vectors supplied")
    tau = num / pairs
    lo = -1.0 / (m_max - 1) + CLAMP_MARGIN
    return float(min(max(tau, lo), 1.0 - CLAMP_MARGIN))


def estimate_ar1_tau(residuals) -> float:
    """Average of within-cluster lag-1 residual products, clamped to (-1, 1)."""
    num, lags = 0.0, 0
    for eps in residuals:
        eps = np.asarray(eps, dtype=np.float64)
        mi = eps.shape[0]
        if mi < 2:
            raise ValueError("AR-1 estimation needs cluster sizes >= 2")
        num += float(eps[:-1] @ eps[1:])
        lags += mi - 1
    if lags == 0:
        raise ValueError("no residual vectors supplied")
    tau = num / lags
    return float(min(max(tau, -1.0 + CLAMP_MARGIN), 1.0 - CLAMP_MARGIN))


def exchangeable_tau_bounds(m_max):
    """Clamp interval used by estimate_exchangeable_tau for a maximum size."""
    return (-1.0 / (m_max - 1) + CLAMP_MARGIN, 1.0 - CLAMP_MARGIN)


def ar1_tau_bounds():
    return (-1.0 + CLAMP_MARGIN, 1.0 - CLAMP_MARGIN)


def _stacked_residuals(data, model, beta):
    (group,) = data.groups()
    beta = np.asarray(beta, dtype=np.float64)
    theta = group.X @ beta
    mu = model.mean(theta)
    v = model.variance(theta)
    if np.any(v <= 0.0):
        raise ValueError("marginal variance underflowed while standardizing residuals")
    return (group.Y - mu) / np.sqrt(v)
