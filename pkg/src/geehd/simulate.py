"""Seeded data generator for the Monte Carlo studies.

Clusters carry AR(1)-correlated Gaussian covariates and exchangeably
correlated binary responses drawn from a second-order Bahadur probability
mass function.  Every cluster owns its own counter-based random stream
derived from (seed, replication, cluster), so replications can be generated
in any order, in parallel, with bit-identical results.

The second-order Bahadur pmf is only a valid distribution where all of its
cells are nonnegative.  Three handling policies exist for covariate draws
that land outside the validity region, selected by ``SimDesign.invalid_policy``:

``regenerate`` (default)
    Redraw the cluster's covariates from the same stream until the pmf is
    valid (capped).  Accepted clusters follow the exact target marginals and
    correlation, so fitted models see correctly specified data; the realized
    covariate distribution is tilted toward the validity region, and the
    tilt grows with the covariate dimension.

``clamp``
    Keep the covariate draw and shrink the pairwise correlation of the
    affected cluster to the largest feasible value (closed form).  The
    covariate distribution and the response marginals stay exactly as
    specified; only the within-cluster correlation of affected clusters
    falls below the target.

``truncate``
    Keep the covariate draw, clip negative cells to zero, and renormalize.
    The covariate distribution stays exactly as specified; the response law
    of affected clusters is the nearest valid distribution, so their
    marginals and pairwise correlation deviate slightly from the targets.

Affected clusters are counted under every policy, and the dataset aborts
when their rate exceeds the configured budget.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Union

import numpy as np

from . import _kernels
from .model import ClusteredDataset

MAX_ENUM_M = 20
CELL_TOL = 1e-12
REGEN_CAP = 100

BETA_PATTERNS = ("blocks", "blocks_with_nulls")


class BahadurInvalidError(ValueError):
    """A pmf cell went negative: the requested correlation is infeasible here."""

    def __init__(self, outcome, value):
        self.outcome = tuple(int(b) for b in outcome)
        self.value = float(value)
        super().__init__(
            f"pmf cell for outcome {self.outcome} is negative ({self.value:.3e})"
        )


class ValidityRateError(RuntimeError):
    """Too many clusters required regeneration for the dataset to be trusted."""


@dataclass(frozen=True)
class SimDesign:
    """Design of one simulated dataset family.

    ``p_override`` fixes the covariate dimension; otherwise it follows the
    dimension rule ``pn_rule``.  ``beta_pattern`` is one of the named
    patterns or an explicit coefficient vector.
    """

    n: int
    p_override: Optional[int] = None
    m: int = 3
    covariate_variance: float = 0.2
    covariate_rho: float = 0.5
    response_rho: float = 0.5
    beta_pattern: Union[str, np.ndarray] = "blocks"
    replications: int = 1
    seed: int = 0
    invalid_policy: str = "regenerate"
    max_regen_rate: float = 0.01

    def __post_init__(self):
        if self.n < 1:
            raise ValueError("n must be positive")
        if not (1 <= self.m <= MAX_ENUM_M):
            raise ValueError(f"m must lie in 1..{MAX_ENUM_M}")
        if not -1.0 < self.covariate_rho < 1.0:
            raise ValueError("covariate_rho must lie in (-1, 1)")
        if self.covariate_variance <= 0.0:
            raise ValueError("covariate_variance must be positive")
        if self.replications < 1:
            raise ValueError("replications must be positive")
        if not 0 <= self.seed < 2**64:
            raise ValueError("seed must fit in an unsigned 64-bit integer")
        if self.invalid_policy not in ("regenerate", "clamp", "truncate"):
            raise ValueError("invalid_policy must be 'regenerate', 'clamp', or 'truncate'")

    @property
    def p(self):
        return self.p_override if self.p_override is not None else pn_rule(self.n)

    def beta(self):
        if isinstance(self.beta_pattern, str):
            return beta_pattern(self.p, self.beta_pattern)
        b = np.asarray(self.beta_pattern, dtype=np.float64)
        if b.shape != (self.p,):
            raise ValueError(f"custom pattern must have length p={self.p}")
        return b


@dataclass(frozen=True)
class GenerationDiagnostics:
    """Bookkeeping for pmf-validity handling during one dataset draw.

    ``clusters_regenerated`` counts clusters whose first pmf was invalid,
    whichever policy handled them.  ``min_pmf_cell`` is the most negative
    raw cell among clusters kept by clamp/truncate, otherwise the smallest
    accepted cell (rejected draws under the regenerate policy are not
    recorded).
    """

    clusters_regenerated: int
    total_regenerations: int
    min_pmf_cell: float
    rng_streams_used: int


def pn_rule(n: int) -> int:
    """Covariate dimension rule: largest k with (k / 2.5)^3 <= n, in exact arithmetic."""
    if n < 1:
        raise ValueError("n must be positive")
    # k = floor(2.5 * n^(1/3))  <=>  8 k^3 <= 125 n, evaluated in integers
    k = int(round(2.5 * float(n) ** (1.0 / 3.0)))
    while 8 * k**3 <= 125 * n:
        k += 1
    while 8 * k**3 > 125 * n:
        k -= 1
    return k


def beta_pattern(p: int, pattern: str) -> np.ndarray:
    """Named true-coefficient patterns of length p."""
    if pattern == "blocks":
        if p < 4:
            raise ValueError("blocks pattern needs p >= 4")
        k = p // 4
        return np.concatenate(
            [
                0.4 * np.ones(k),
                -0.3 * np.ones(k),
                0.2 * np.ones(k),
                -0.1 * np.ones(p - 3 * k),
            ]
        )
    if pattern == "blocks_with_nulls":
        if p != 24:
            raise ValueError("blocks_with_nulls pattern is defined for p = 24")
        return np.concatenate(
            [
                0.4 * np.ones(6),
                -0.3 * np.ones(6),
                0.2 * np.ones(6),
                -0.1 * np.ones(2),
                np.zeros(4),
            ]
        )
    raise ValueError(f"unknown pattern {pattern!r}; choose from {BETA_PATTERNS}")


def make_stream(seed: int, replication: int, cluster: int) -> np.random.Generator:
    """Counter-based stream for one (replication, cluster) pair.

    Distinct key tuples give statistically independent streams, so dataset
    generation is order-independent and parallel-safe.
    """
    if not 0 <= replication < 2**32:
        raise ValueError("replication index must fit in 32 bits")
    if not 0 <= cluster < 2**32:
        raise ValueError("cluster index must fit in 32 bits")
    key = np.array([seed, (replication << 32) | cluster], dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key))


def gen_covariates(rng, m: int, p: int, variance: float, rho: float) -> np.ndarray:
    """Rows are independent; along each row the coordinates follow a
    stationary AR(1) recursion with the requested marginal variance."""
    z = rng.standard_normal((m, p))
    return _kernels.ar1_path(z, rho, math.sqrt(variance))


def _outcome_matrix(m):
    idx = np.arange(2**m, dtype=np.uint32)
    cols = [(idx >> j) & 1 for j in range(m)]
    return np.ascontiguousarray(np.stack(cols, axis=1), dtype=np.float64)


_OUTCOME_CACHE = {}


def outcome_matrix(m: int) -> np.ndarray:
    """All binary outcomes of length m in counting order, first bit least significant."""
    if not 1 <= m <= MAX_ENUM_M:
        raise ValueError(f"enumeration supported for m in 1..{MAX_ENUM_M}")
    if m not in _OUTCOME_CACHE:
        _OUTCOME_CACHE[m] = _outcome_matrix(m)
    return _OUTCOME_CACHE[m]


def bahadur_pmf(pi, rho: float) -> np.ndarray:
    """Second-order exchangeable-correlation binary pmf over all 2^m outcomes.

    Raises BahadurInvalidError when any cell is negative beyond tolerance.
    """
    pi = np.asarray(pi, dtype=np.float64)
    m = pi.shape[0]
    if np.any(pi <= 0.0) or np.any(pi >= 1.0):
        raise ValueError("marginal probabilities must lie strictly in (0, 1)")
    outcomes = outcome_matrix(m)
    cells = _kernels.bahadur_cells(pi, float(rho), outcomes)
    worst = int(np.argmin(cells))
    if cells[worst] < -CELL_TOL:
        raise BahadurInvalidError(outcomes[worst], cells[worst])
    return cells


def gen_responses(rng, pi, rho: float) -> np.ndarray:
    """One draw from the enumerated pmf via a single uniform and cumulative sums."""
    cells = bahadur_pmf(pi, rho)
    return _draw_outcome(rng, cells, outcome_matrix(len(pi)))


def _draw_outcome(rng, cells, outcomes):
    cum = np.cumsum(np.maximum(cells, 0.0))
    u = rng.random() * cum[-1]
    idx = min(int(np.searchsorted(cum, u, side="right")), len(cells) - 1)
    return outcomes[idx].copy()


def _feasible_rho(pair, rho):
    """Largest-magnitude correlation toward ``rho`` keeping all cells nonnegative."""
    hi = np.inf
    lo = -np.inf
    neg = pair < 0.0
    if neg.any():
        hi = float((-1.0 / pair[neg]).min())
    pos = pair > 0.0
    if pos.any():
        lo = float((-1.0 / pair[pos]).max())
    return min(max(rho, lo), hi)


def gen_dataset(design: SimDesign, replication_index: int):
    """Generate one seeded dataset.

    Returns (dataset, true_beta, diagnostics).  Deterministic given
    (design, replication_index) regardless of execution order.
    """
    p = design.p
    m = design.m
    beta0 = design.beta()
    outcomes = outcome_matrix(m)
    sd_x = math.sqrt(design.covariate_variance)
    rho_x = float(design.covariate_rho)
    rho_y = float(design.response_rho)
    Y = np.empty((design.n, m))
    X = np.empty((design.n, m, p))
    policy = design.invalid_policy
    affected = 0
    total_regens = 0
    min_cell = np.inf
    for i in range(design.n):
        rng = make_stream(design.seed, replication_index, i)
        retries = 0
        while True:
            z = rng.standard_normal((m, p))
            x = _kernels.ar1_path(z, rho_x, sd_x)
            cells = _kernels.logit_bahadur_cells(x, beta0, rho_y, outcomes)
            low = cells.min()
            if low >= -CELL_TOL:
                min_cell = min(min_cell, low)
                Y[i] = _draw_outcome(rng, cells, outcomes)
                X[i] = x
                break
            if policy == "clamp":
                min_cell = min(min_cell, low)
                affected += 1
                base, pair = _kernels.logit_bahadur_parts(x, beta0, outcomes)
                Y[i] = _draw_outcome(rng, base * (1.0 + _feasible_rho(pair, rho_y) * pair), outcomes)
                X[i] = x
                break
            if policy == "truncate":
                min_cell = min(min_cell, low)
                affected += 1
                Y[i] = _draw_outcome(rng, cells, outcomes)
                X[i] = x
                break
            retries += 1
            if retries > REGEN_CAP:
                raise ValidityRateError(
                    f"cluster {i} exceeded {REGEN_CAP} covariate regenerations"
                )
        if retries:
            affected += 1
            total_regens += retries
    rate = affected / design.n
    if rate > design.max_regen_rate:
        raise ValidityRateError(
            f"pmf-adjustment rate {rate:.3f} exceeds limit {design.max_regen_rate:.3f} "
            f"({affected} of {design.n} clusters, policy {design.invalid_policy})"
        )
    diag = GenerationDiagnostics(
        clusters_regenerated=affected,
        total_regenerations=total_regens,
        min_pmf_cell=float(min_cell),
        rng_streams_used=design.n,
    )
    return ClusteredDataset.from_stacked(Y, X), beta0, diag


def gen_poisson_dataset(n, p, beta, seed, replication_index=0, m=3,
                        covariate_variance=0.2, covariate_rho=0.5):
    """Log-linear count data with conditionally independent responses.

    Smoke-test generator for the general-family path; shares the covariate
    machinery and stream contract with gen_dataset.
    """
    beta = np.asarray(beta, dtype=np.float64)
    if beta.shape != (p,):
        raise ValueError(f"beta must have length {p}")
    sd_x = math.sqrt(covariate_variance)
    Y = np.empty((n, m))
    X = np.empty((n, m, p))
    for i in range(n):
        rng = make_stream(seed, replication_index, i)
        z = rng.standard_normal((m, p))
        x = _kernels.ar1_path(z, covariate_rho, sd_x)
        lam = np.exp(x @ beta)
        Y[i] = rng.poisson(lam)
        X[i] = x
    return ClusteredDataset.from_stacked(Y, X), beta
