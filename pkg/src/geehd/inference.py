"""Sandwich covariance, confidence intervals, and Wald-type tests.

The sandwich estimator stays valid when the working correlation is wrong,
which is what makes the intervals and tests here trustworthy under
misspecification.  Coordinate indices on the public surfaces are 1-based to
match the reporting conventions of the harness (columns ``x1..xp``).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
from scipy.special import gammaincc, ndtri

from .estimator import FitResult, middle_matrix, rinv_map_for
from .model import ClusteredDataset, MarginalModel
from .numerics import SpdFactor, symmetrize


def chi2_sf(x, df):
    """Upper tail of the chi-square distribution (regularized incomplete gamma)."""
    return float(gammaincc(df / 2.0, x / 2.0))


def normal_upper_quantile(q):
    """z such that P(Z > z) = q for standard normal Z."""
    return float(ndtri(1.0 - q))


@dataclass(frozen=True)
class Hypothesis:
    """Linear hypothesis L beta = null_value with a fixed small number of rows."""

    L: np.ndarray
    null_value: Optional[np.ndarray] = None

    def __post_init__(self):
        L = np.atleast_2d(np.asarray(self.L, dtype=np.float64))
        l, p = L.shape
        if l > p:
            raise ValueError("hypothesis has more rows than coefficients")
        if np.linalg.matrix_rank(L) < l:
            raise ValueError("hypothesis rows are linearly dependent")
        h = self.null_value
        h = np.zeros(l) if h is None else np.asarray(h, dtype=np.float64)
        if h.shape != (l,):
            raise ValueError(f"null value must have shape ({l},)")
        object.__setattr__(self, "L", L)
        object.__setattr__(self, "null_value", h)


@dataclass(frozen=True)
class WaldResult:
    statistic: float
    df: int
    p_value: float


@dataclass(frozen=True)
class HighDimTestResult:
    z: float
    quadratic_form: float
    p_n: int


def sandwich_covariance(fit: FitResult, data: ClusteredDataset, model: MarginalModel):
    """Recompute the sandwich covariance at the fitted solution and store it.

    The middle matrix replaces the unknown true correlation with the outer
    product of each cluster's standardized residual vector.
    """
    if not fit.converged:
        raise ValueError("sandwich covariance requires a converged fit")
    rinv = rinv_map_for(fit, [g.m for g in data.groups()])
    M = middle_matrix(data, model, fit.beta_hat, rinv)
    Hf = SpdFactor(fit.H)
    sigma = symmetrize(Hf.solve(Hf.solve(M).T))
    fit.M_hat = M
    fit.sigma_hat = sigma
    return sigma


def confidence_interval(fit: FitResult, j: int, alpha: float):
    """Normal-approximation interval for coefficient j (1-based) at level 1 - alpha.

    The half-width is the quantile times the standard error, i.e. the square
    root of the j-th diagonal entry of the sandwich covariance.
    """
    if not 0.0 < alpha <= 1.0:
        raise ValueError("alpha must lie in (0, 1]")
    if not 1 <= j <= fit.p:
        raise IndexError(f"coordinate {j} out of range 1..{fit.p}")
    se = float(np.sqrt(fit.sigma_hat[j - 1, j - 1]))
    z = normal_upper_quantile(alpha / 2.0) if alpha < 1.0 else 0.0
    b = float(fit.beta_hat[j - 1])
    return b - z * se, b + z * se


def wald_test(fit: FitResult, hyp: Hypothesis) -> WaldResult:
    """Quadratic-form test of L beta = null_value against the sandwich covariance.

    Invariant under invertible row transformations of L, so no normalization
    of the hypothesis rows is required.
    """
    L = hyp.L
    if L.shape[1] != fit.p:
        raise ValueError(f"hypothesis has {L.shape[1]} columns, fit has p={fit.p}")
    diff = L @ fit.beta_hat - hyp.null_value
    V = symmetrize(L @ fit.sigma_hat @ L.T)
    w = float(diff @ SpdFactor(V).solve(diff))
    df = L.shape[0]
    return WaldResult(statistic=w, df=df, p_value=chi2_sf(w, df))


def high_dim_test(fit: FitResult, beta_null) -> HighDimTestResult:
    """Normalized full-vector test: (quadratic form - p) / sqrt(2 p)."""
    beta_null = np.asarray(beta_null, dtype=np.float64)
    if beta_null.shape != (fit.p,):
        raise ValueError(f"null vector must have shape ({fit.p},)")
    diff = fit.beta_hat - beta_null
    q = float(diff @ SpdFactor(fit.sigma_hat).solve(diff))
    z = (q - fit.p) / np.sqrt(2.0 * fit.p)
    return HighDimTestResult(z=float(z), quadratic_form=q, p_n=fit.p)


@dataclass(frozen=True)
class ConsistencyReport:
    """Scaled gaps between average sandwich and Monte Carlo covariance, by sample size."""

    sample_sizes: tuple
    scaled_gaps: tuple
    decreasing: bool

    def __str__(self):
        rows = "\n".join(
            f"  n={n}: max-abs n*(C Sigma_hat C' - C Sigma_mc C') = {g:.6g}"
            for n, g in zip(self.sample_sizes, self.scaled_gaps)
        )
        return f"ConsistencyReport(decreasing={self.decreasing})\n{rows}"


def sandwich_consistency_probe(fit_groups: Sequence[Sequence[FitResult]], C) -> ConsistencyReport:
    """Check that the sandwich tracks the Monte Carlo covariance as n grows.

    ``fit_groups`` holds replicated fits, one inner sequence per sample size,
    ordered by increasing n.  Each group needs at least 100 replications.
    """
    C = np.atleast_2d(np.asarray(C, dtype=np.float64))
    if len(fit_groups) < 2:
        raise ValueError("need fits at two or more sample sizes")
    ns, gaps = [], []
    for fits in fit_groups:
        fits = list(fits)
        if len(fits) < 100:
            raise ValueError("each sample size needs at least 100 replicated fits")
        n = fits[0].n
        if any(f.n != n for f in fits):
            raise ValueError("fits within one group must share the sample size")
        betas = np.array([f.beta_hat for f in fits])
        sigma_mc = np.atleast_2d(np.cov(betas, rowvar=False, ddof=1))
        avg_cs = np.mean([C @ f.sigma_hat @ C.T for f in fits], axis=0)
        gap = n * np.max(np.abs(avg_cs - C @ sigma_mc @ C.T))
        ns.append(n)
        gaps.append(float(gap))
    if ns != sorted(ns):
        raise ValueError("groups must be ordered by increasing sample size")
    decreasing = all(b < a for a, b in zip(gaps, gaps[1:]))
    return ConsistencyReport(tuple(ns), tuple(gaps), decreasing)
