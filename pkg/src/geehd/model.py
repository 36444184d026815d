"""Domain types for clustered data and marginal mean/variance models.

Marginal models are canonical exponential-family specifications with the
dispersion fixed at 1, so the variance function equals the first derivative
of the mean function.  Two families are provided: logistic-binary and
log-Poisson.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np


class DimensionError(ValueError):
    """Shapes of responses, covariates, or parameters do not agree."""


class DegenerateFitError(RuntimeError):
    """A marginal variance underflowed to zero at the current parameters."""


_BELOW_ONE = np.nextafter(1.0, 0.0)
_ABOVE_ZERO = np.nextafter(0.0, 1.0)


def _logit_small_side(theta):
    # mu(-|theta|) = exp(-|theta|) / (1 + exp(-|theta|)), accurate near 0
    q = np.exp(-np.abs(np.asarray(theta, dtype=np.float64)))
    return q / (1.0 + q)


def _logit_mean(theta):
    theta = np.asarray(theta, dtype=np.float64)
    s = _logit_small_side(theta)
    # clamp to the nearest representable values inside (0, 1) so the open
    # interval contract holds for every finite argument
    return np.where(
        theta >= 0,
        np.minimum(1.0 - s, _BELOW_ONE),
        np.maximum(s, _ABOVE_ZERO),
    )


def _logit_variance(theta):
    s = _logit_small_side(theta)
    return s * (1.0 - s)


def _logit_d2mean(theta):
    mu = _logit_mean(theta)
    return mu * (1.0 - mu) * (1.0 - 2.0 * mu)


def _logit_d3mean(theta):
    mu = _logit_mean(theta)
    v = mu * (1.0 - mu)
    return v * ((1.0 - 2.0 * mu) ** 2 - 2.0 * v)


def _exp(theta):
    return np.exp(np.asarray(theta, dtype=np.float64))


@dataclass(frozen=True)
class MarginalModel:
    """Mean, variance, and mean derivatives for one response family.

    All callables are vectorized over the linear predictor.  ``cratio``
    (second mean derivative over variance) is the weight entering the exact
    Jacobian of the estimating function.
    """

    family: str
    mean: Callable[[np.ndarray], np.ndarray]
    variance: Callable[[np.ndarray], np.ndarray]
    dmean: Callable[[np.ndarray], np.ndarray]
    d2mean: Callable[[np.ndarray], np.ndarray]
    d3mean: Callable[[np.ndarray], np.ndarray]

    def cratio(self, theta):
        v = self.variance(theta)
        return self.d2mean(theta) / v

    def __repr__(self):
        return f"MarginalModel({self.family})"


BINARY_LOGIT = MarginalModel(
    family="binary_logit",
    mean=_logit_mean,
    variance=_logit_variance,
    dmean=_logit_variance,
    d2mean=_logit_d2mean,
    d3mean=_logit_d3mean,
)

POISSON_LOG = MarginalModel(
    family="poisson_log",
    mean=_exp,
    variance=_exp,
    dmean=_exp,
    d2mean=_exp,
    d3mean=_exp,
)

_FAMILIES = {"binary_logit": BINARY_LOGIT, "poisson_log": POISSON_LOG}


def get_model(name: str) -> MarginalModel:
    try:
        return _FAMILIES[name]
    except KeyError:
        raise ValueError(f"unknown family {name!r}; choose from {sorted(_FAMILIES)}") from None


@dataclass(frozen=True)
class ClusterObservation:
    """Responses and covariate rows for one cluster."""

    y: np.ndarray
    X: np.ndarray

    def __post_init__(self):
        y = np.ascontiguousarray(self.y, dtype=np.float64)
        X = np.ascontiguousarray(self.X, dtype=np.float64)
        if X.ndim != 2:
            raise DimensionError("covariates must be a 2-d array (m, p)")
        if y.ndim != 1 or y.shape[0] != X.shape[0]:
            raise DimensionError(
                f"response length {y.shape} does not match covariate rows {X.shape}"
            )
        if X.shape[0] < 1:
            raise DimensionError("cluster must contain at least one observation")
        if not (np.isfinite(y).all() and np.isfinite(X).all()):
            raise ValueError("non-finite entries in cluster data")
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "X", X)

    @property
    def m(self):
        return self.y.shape[0]

    @property
    def p(self):
        return self.X.shape[1]


@dataclass(frozen=True)
class SizeGroup:
    """Clusters of one common size stacked for batched kernels."""

    m: int
    indices: np.ndarray   # positions in the original cluster order
    Y: np.ndarray         # (g, m)
    X: np.ndarray         # (g, m, p)


class ClusteredDataset:
    """An immutable collection of independent clusters sharing a design dimension."""

    def __init__(self, clusters):
        clusters = list(clusters)
        if not clusters:
            raise DimensionError("dataset must contain at least one cluster")
        p = clusters[0].p
        for c in clusters:
            if c.p != p:
                raise DimensionError("all clusters must share the covariate dimension")
        self._clusters = clusters
        self.n = len(clusters)
        self.p = p
        sizes = {c.m for c in clusters}
        self.m_common: Optional[int] = sizes.pop() if len(sizes) == 1 else None
        self._groups = None

    @classmethod
    def from_stacked(cls, Y, X):
        """Build from pre-stacked arrays Y (n, m), X (n, m, p) with a common size."""
        Y = np.ascontiguousarray(Y, dtype=np.float64)
        X = np.ascontiguousarray(X, dtype=np.float64)
        if Y.ndim != 2 or X.ndim != 3 or Y.shape != X.shape[:2]:
            raise DimensionError("stacked arrays must be (n, m) and (n, m, p)")
        self = cls.__new__(cls)
        self._clusters = None
        self._stacked = (Y, X)
        self.n = Y.shape[0]
        self.p = X.shape[2]
        self.m_common = Y.shape[1]
        self._groups = [SizeGroup(self.m_common, np.arange(self.n), Y, X)]
        return self

    @property
    def clusters(self):
        if self._clusters is None:
            Y, X = self._stacked
            self._clusters = [ClusterObservation(Y[i], X[i]) for i in range(self.n)]
        return self._clusters

    def groups(self):
        """Clusters grouped by size, stacked as contiguous arrays (cached)."""
        if self._groups is None:
            by_size = {}
            for idx, c in enumerate(self._clusters):
                by_size.setdefault(c.m, []).append(idx)
            out = []
            for m in sorted(by_size):
                idx = np.array(by_size[m], dtype=np.intp)
                Y = np.ascontiguousarray([self._clusters[i].y for i in idx])
                X = np.ascontiguousarray([self._clusters[i].X for i in idx])
                out.append(SizeGroup(m, idx, Y, X))
            self._groups = out
        return self._groups

    def __len__(self):
        return self.n

    def __repr__(self):
        m = self.m_common if self.m_common is not None else "ragged"
        return f"ClusteredDataset(n={self.n}, p={self.p}, m={m})"


def as_param_vector(beta, p):
    """Validate and coerce a coefficient vector of length p."""
    beta = np.ascontiguousarray(beta, dtype=np.float64)
    if beta.shape != (p,):
        raise DimensionError(f"parameter vector must have shape ({p},), got {beta.shape}")
    if not np.isfinite(beta).all():
        raise ValueError("parameter vector has non-finite entries")
    return beta


def validate_responses(data: ClusteredDataset, model: MarginalModel):
    """Family-specific response checks (binary in {0,1}; counts nonnegative integers)."""
    for g in data.groups():
        if model.family == "binary_logit":
            bad = ~np.isin(g.Y, (0.0, 1.0))
        else:
            bad = (g.Y < 0) | (g.Y != np.floor(g.Y))
        if bad.any():
            i = int(g.indices[np.argwhere(bad)[0][0]])
            raise ValueError(
                f"cluster {i}: response invalid for family {model.family!r}"
            )


def linear_predictor(cluster: ClusterObservation, beta) -> np.ndarray:
    """Per-observation linear predictor X @ beta for one cluster."""
    beta = as_param_vector(beta, cluster.p)
    return cluster.X @ beta


def marginal_mean(model: MarginalModel, theta) -> np.ndarray:
    return model.mean(theta)


def marginal_variance(model: MarginalModel, theta) -> np.ndarray:
    return model.variance(theta)


def pearson_residuals(cluster: ClusterObservation, model: MarginalModel, beta) -> np.ndarray:
    """Variance-standardized residuals (y - mu) / sqrt(v) for one cluster."""
    theta = linear_predictor(cluster, beta)
    mu = model.mean(theta)
    v = model.variance(theta)
    if np.any(v <= 0.0) or not np.isfinite(v).all():
        raise DegenerateFitError(
            "marginal variance underflowed; fit is degenerate at these parameters"
        )
    return (cluster.y - mu) / np.sqrt(v)
