"""Score evaluation and the fitting loops.

Two fitters are provided.  ``fit_independence`` solves the unweighted
estimating equations by Newton iteration and doubles as the initial
estimator.  ``fit_gee`` alternates a residual-based moment update of the
working correlation with one modified Fisher-scoring step, declaring
convergence on the max-abs score norm; the information surrogate (not the
exact Jacobian) drives the step because it is symmetric positive definite.

The exact Jacobian of the score is available separately for verification:
it decomposes into the information plus two residual-weighted correction
terms and is checked against finite differences in the test suite.
"""

from __future__ import annotations

from dataclasses import dataclass, field
import numpy as np

from . import _kernels
from .correlation import (
    AutoRegressive1,
    Exchangeable,
    Independence,
    ar1_tau_bounds,
    exchangeable_tau_bounds,
    inverse_correlation,
    symmetrize,
)
from .model import (
    ClusteredDataset,
    DegenerateFitError,
    DimensionError,
    MarginalModel,
    as_param_vector,
    validate_responses,
)
from .numerics import SpdFactor


VARIANCE_GUARD = 1e-10


@dataclass(frozen=True)
class FitOptions:
    max_outer_iterations: int = 50
    score_tolerance: float = 1e-8
    step_halving_max: int = 10
    parameter_tolerance: float = 1e-10

    def __post_init__(self):
        if min(self.max_outer_iterations, self.step_halving_max) < 1:
            raise ValueError("iteration counts must be positive")
        if min(self.score_tolerance, self.parameter_tolerance) <= 0:
            raise ValueError("tolerances must be positive")


@dataclass
class FitResult:
    """Converged coefficients with the pieces of the sandwich covariance."""

    beta_hat: np.ndarray
    structure_final: object
    H: np.ndarray
    M_hat: np.ndarray
    sigma_hat: np.ndarray
    iterations: int
    converged: bool
    final_score_norm: float
    family: str = ""
    structure_kind: str = ""
    n: int = 0
    p: int = 0
    diagnostics: dict = field(default_factory=dict)

    def standard_errors(self):
        return np.sqrt(np.diag(self.sigma_hat))


def _mu_sq(model, group, beta):
    theta = group.X @ beta
    mu = model.mean(theta)
    v = model.variance(theta)
    if np.any(v <= 0.0) or not np.isfinite(v).all():
        raise DegenerateFitError("marginal variance underflowed during fitting")
    return mu, np.sqrt(v)


def group_residuals(group, model, beta):
    mu, sq = _mu_sq(model, group, beta)
    return (group.Y - mu) / sq


def _rinv_for(rinv, m):
    if isinstance(rinv, dict):
        try:
            R = rinv[m]
        except KeyError:
            raise DimensionError(f"no inverse correlation supplied for cluster size {m}")
    else:
        R = np.asarray(rinv, dtype=np.float64)
    if R.shape != (m, m):
        raise DimensionError(f"inverse correlation shape {R.shape} does not match m={m}")
    return np.ascontiguousarray(R)


def score(data: ClusteredDataset, model: MarginalModel, beta, rinv) -> np.ndarray:
    """Weighted estimating-function value, summed over clusters.

    ``rinv`` is either a single (m, m) inverse working correlation (common
    cluster size) or a mapping from cluster size to the inverse matrix.
    """
    beta = as_param_vector(beta, data.p)
    s = np.zeros(data.p)
    for g in data.groups():
        mu, sq = _mu_sq(model, g, beta)
        s += _kernels.score_only(g.Y, g.X, mu, sq, _rinv_for(rinv, g.m))
    return s


def fisher_information(data, model, beta, rinv) -> np.ndarray:
    """Weighted information surrogate: sum of X' A^{1/2} Rinv A^{1/2} X."""
    beta = as_param_vector(beta, data.p)
    H = np.zeros((data.p, data.p))
    for g in data.groups():
        mu, sq = _mu_sq(model, g, beta)
        _, Hi = _kernels.score_info(g.Y, g.X, mu, sq, _rinv_for(rinv, g.m))
        H += Hi
    return symmetrize(H)


def score_and_information(data, model, beta, rinv):
    beta = as_param_vector(beta, data.p)
    s = np.zeros(data.p)
    H = np.zeros((data.p, data.p))
    for g in data.groups():
        mu, sq = _mu_sq(model, g, beta)
        si, Hi = _kernels.score_info(g.Y, g.X, mu, sq, _rinv_for(rinv, g.m))
        s += si
        H += Hi
    return s, symmetrize(H)


def middle_matrix(data, model, beta, rinv) -> np.ndarray:
    """Empirical middle term of the sandwich: sum of squared score contributions."""
    beta = as_param_vector(beta, data.p)
    M = np.zeros((data.p, data.p))
    for g in data.groups():
        mu, sq = _mu_sq(model, g, beta)
        M += _kernels.middle_matrix(g.Y, g.X, mu, sq, _rinv_for(rinv, g.m))
    return symmetrize(M)


def exact_jacobian(data, model, beta, rinv) -> np.ndarray:
    """Minus the analytic derivative of the score; not symmetric in general."""
    beta = as_param_vector(beta, data.p)
    D = np.zeros((data.p, data.p))
    for g in data.groups():
        mu, sq = _mu_sq(model, g, beta)
        R = _rinv_for(rinv, g.m)
        _, Hi = _kernels.score_info(g.Y, g.X, mu, sq, R)
        theta = g.X @ beta
        cratio = np.ascontiguousarray(model.cratio(theta))
        D += Hi + _kernels.jacobian_extra(g.Y, g.X, mu, sq, cratio, R)
    return D


def fit_independence(
    data: ClusteredDataset, model: MarginalModel, opts: FitOptions = FitOptions()
) -> FitResult:
    """Newton fit of the unweighted (working-independence) equations.

    Coincides with the ordinary maximum-likelihood fit for both families.
    Starts at zero and applies step halving whenever a full step fails to
    reduce the max-abs score norm.  Serves as the initializer for the full
    GEE fit.
    """
    validate_responses(data, model)
    beta = np.zeros(data.p)
    groups = data.groups()

    def score_only(b):
        s = np.zeros(data.p)
        for g in groups:
            theta = g.X @ b
            mu = model.mean(theta)
            s += g.X.reshape(-1, data.p).T @ (g.Y - mu).reshape(-1)
        return s

    def score_info(b):
        s = np.zeros(data.p)
        H = np.zeros((data.p, data.p))
        for g in groups:
            theta = g.X @ b
            mu = model.mean(theta)
            v = model.variance(theta)
            if np.any(v <= 0.0):
                raise DegenerateFitError("marginal variance underflowed during fitting")
            Xf = g.X.reshape(-1, data.p)
            s += Xf.T @ (g.Y - mu).reshape(-1)
            W = (np.sqrt(v).reshape(-1, 1)) * Xf
            H += W.T @ W
        return s, symmetrize(H)

    beta_norms = []
    halvings = 0
    monotone = True
    s = score_only(beta)
    norm = float(np.max(np.abs(s)))
    converged = norm <= opts.score_tolerance
    it = 0
    while not converged and it < opts.max_outer_iterations:
        it += 1
        s, H = score_info(beta)
        norm = float(np.max(np.abs(s)))
        if norm <= opts.score_tolerance:
            converged = True
            break
        step = SpdFactor(H).solve(s)
        beta, norm, h, ok = _halved_step(score_only, beta, step, norm, opts)
        halvings += h
        monotone = monotone and ok
        beta_norms.append(float(np.linalg.norm(beta)))
        if norm <= opts.score_tolerance:
            converged = True
            break
        if float(np.max(np.abs(step))) <= opts.parameter_tolerance:
            break

    degenerate = _min_variance(groups, model, beta) < VARIANCE_GUARD
    if degenerate:
        # a "root" reached only because residuals underflowed (e.g. complete
        # separation) is not a valid solution
        converged = False
    growing = (
        not converged
        and len(beta_norms) >= 3
        and bool(np.all(np.diff(beta_norms[-3:]) > 0))
    )
    structure = Independence()
    rinv = {g.m: np.eye(g.m) for g in groups}
    H = fisher_information(data, model, beta, rinv)
    M, sigma = _sandwich_pieces(data, model, beta, rinv, H)
    return FitResult(
        beta_hat=beta,
        structure_final=structure,
        H=H,
        M_hat=M,
        sigma_hat=sigma,
        iterations=it,
        converged=converged,
        final_score_norm=norm,
        family=model.family,
        structure_kind="independence",
        n=data.n,
        p=data.p,
        diagnostics={
            "step_halvings": halvings,
            "monotone": monotone,
            "beta_norm_growing": growing,
            "degenerate_variance": degenerate,
            "initial_fit": True,
        },
    )


def _halved_step(score_fn, beta, step, norm0, opts):
    """Try beta + step, halving until the score norm does not increase."""
    scale = 1.0
    best = None
    for h in range(opts.step_halving_max + 1):
        cand = beta + scale * step
        norm = float(np.max(np.abs(score_fn(cand))))
        if best is None or norm < best[1]:
            best = (cand, norm, h)
        if norm <= norm0:
            return cand, norm, h, True
        scale *= 0.5
    cand, norm, h = best
    return cand, norm, h, False


def _min_variance(groups, model, beta):
    vmin = np.inf
    for g in groups:
        vmin = min(vmin, float(model.variance(g.X @ beta).min()))
    return vmin


def _sandwich_pieces(data, model, beta, rinv, H):
    M = middle_matrix(data, model, beta, rinv)
    Hf = SpdFactor(H)
    sigma = symmetrize(Hf.solve(Hf.solve(M).T))
    return M, sigma


def _estimate_structure(kind, data, model, beta, m_max):
    """Moment-update the working correlation from current residuals."""
    clamped = False
    if kind == "independence":
        return Independence(), clamped
    if kind == "unstructured":
        from .correlation import estimate_unstructured

        est = estimate_unstructured(data, model, beta)
        return est.structure, clamped
    # pairwise products need at least two observations per cluster
    num = 0.0
    denom = 0.0
    for g in data.groups():
        if g.m < 2:
            continue
        eps = group_residuals(g, model, beta)
        if kind == "exchangeable":
            s = eps.sum(axis=1)
            num += float(0.5 * ((s * s).sum() - (eps * eps).sum()))
            denom += g.Y.shape[0] * g.m * (g.m - 1) / 2.0
        else:  # ar1
            num += float((eps[:, :-1] * eps[:, 1:]).sum())
            denom += g.Y.shape[0] * (g.m - 1)
    if denom == 0.0:
        # all clusters are singletons; any structure degenerates to identity
        return (Exchangeable(0.0) if kind == "exchangeable" else AutoRegressive1(0.0)), clamped
    tau = num / denom
    lo, hi = exchangeable_tau_bounds(m_max) if kind == "exchangeable" else ar1_tau_bounds()
    if tau < lo or tau > hi:
        clamped = True
        tau = min(max(tau, lo), hi)
    structure = Exchangeable(tau) if kind == "exchangeable" else AutoRegressive1(tau)
    return structure, clamped


def _rinv_map(structure, sizes):
    return {m: inverse_correlation(structure.matrix(m)) for m in sizes}


def fit_gee(
    data: ClusteredDataset,
    model: MarginalModel,
    structure_kind: str,
    opts: FitOptions = FitOptions(),
) -> FitResult:
    """Full GEE fit under a chosen working correlation structure.

    Parameters
    ----------
    data : ClusteredDataset
    model : MarginalModel
    structure_kind : str
        One of ``independence``, ``exchangeable``, ``ar1``, ``unstructured``.
        The unstructured choice requires a common cluster size.
    opts : FitOptions

    Returns
    -------
    FitResult
        Includes the final working correlation, the information and middle
        matrices at the solution, and the sandwich covariance.

    Notes
    -----
    Each outer iteration first re-estimates the nuisance correlation
    parameters from current standardized residuals, then takes one scoring
    step.  Convergence is declared when the max-abs score norm drops below
    ``opts.score_tolerance``; the score is always evaluated at the same
    working correlation that is reported in the result.
    """
    if structure_kind not in ("independence", "exchangeable", "ar1", "unstructured"):
        raise ValueError(f"unknown working correlation kind {structure_kind!r}")
    if structure_kind == "unstructured" and data.m_common is None:
        raise ValueError("unstructured working correlation requires a common cluster size")

    init = fit_independence(data, model, opts)
    if not init.converged:
        init.diagnostics["stage"] = "initial"
        return init
    if structure_kind == "independence":
        init.structure_kind = "independence"
        return init

    beta = init.beta_hat.copy()
    sizes = sorted({g.m for g in data.groups()})
    m_max = sizes[-1]
    tau_clamped = False
    monotone = True
    halvings = 0
    norm = init.final_score_norm
    converged = False
    it = 0
    while it < opts.max_outer_iterations:
        it += 1
        structure, clamped = _estimate_structure(structure_kind, data, model, beta, m_max)
        tau_clamped = tau_clamped or clamped
        rinv = _rinv_map(structure, sizes)
        s, H = score_and_information(data, model, beta, rinv)
        norm = float(np.max(np.abs(s)))
        if norm <= opts.score_tolerance:
            converged = True
            break
        step = SpdFactor(H).solve(s)

        def score_norm_fn(b, _rinv=rinv):
            return score(data, model, b, _rinv)

        beta, norm, h, ok = _halved_step(score_norm_fn, beta, step, norm, opts)
        halvings += h
        monotone = monotone and ok
        if norm <= opts.score_tolerance:
            # re-estimate the structure at the final coefficients so the
            # reported correlation matches the converged residuals
            structure, clamped = _estimate_structure(
                structure_kind, data, model, beta, m_max
            )
            tau_clamped = tau_clamped or clamped
            rinv = _rinv_map(structure, sizes)
            s = score(data, model, beta, rinv)
            norm = float(np.max(np.abs(s)))
            if norm <= opts.score_tolerance:
                converged = True
                break
        if float(np.max(np.abs(step))) <= opts.parameter_tolerance:
            break

    degenerate = _min_variance(data.groups(), model, beta) < VARIANCE_GUARD
    if degenerate:
        converged = False
    H = fisher_information(data, model, beta, rinv)
    M, sigma = _sandwich_pieces(data, model, beta, rinv, H)
    return FitResult(
        beta_hat=beta,
        structure_final=structure,
        H=H,
        M_hat=M,
        sigma_hat=sigma,
        iterations=it,
        converged=converged,
        final_score_norm=norm,
        family=model.family,
        structure_kind=structure_kind,
        n=data.n,
        p=data.p,
        diagnostics={
            "step_halvings": halvings,
            "monotone": monotone,
            "tau_clamped": tau_clamped,
            "degenerate_variance": degenerate,
            "initial_iterations": init.iterations,
        },
    )


def rinv_map_for(fit: FitResult, sizes):
    """Inverse working correlations of a fit's final structure, per cluster size."""
    return _rinv_map(fit.structure_final, sorted(set(sizes)))
