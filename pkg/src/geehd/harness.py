"""CSV ingestion, regularity diagnostics, and the seeded study runners.

Study outputs are a pure function of (config, seed): replications are farmed
out to a worker pool but always aggregated in replication-index order, so the
emitted CSV bytes do not depend on the parallelism level.
"""

from __future__ import annotations

import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from functools import partial
from typing import Optional

import numpy as np
from scipy import stats as _scipy_stats

from .estimator import FitOptions, FitResult, fit_gee
from .inference import Hypothesis, confidence_interval, high_dim_test, wald_test
from .model import ClusteredDataset, ClusterObservation, get_model
from .numerics import eigen_extremes
from .simulate import SimDesign, gen_dataset

JOBS_ENV_VAR = "GEEHD_JOBS"
EXCLUDE_LIMIT = 0.02

EXIT_OK = 0
EXIT_PARSE = 2
EXIT_CONVERGENCE = 3
EXIT_ABORTED = 4


class CsvFormatError(ValueError):
    """Input file violates the expected schema; carries the offending line."""

    def __init__(self, line_number, message):
        self.line_number = line_number
        super().__init__(f"line {line_number}: {message}")


class StudyAbortedError(RuntimeError):
    """A study exceeded its exclusion or validity budget."""


def default_jobs():
    raw = os.environ.get(JOBS_ENV_VAR, "").strip()
    if raw:
        try:
            return max(1, int(raw))
        except ValueError:
            pass
    return 1


def parallel_map(fn, items, jobs):
    """Map preserving input order; identical output for any jobs >= 1."""
    items = list(items)
    if jobs <= 1 or len(items) <= 1:
        return [fn(it) for it in items]
    chunk = max(1, len(items) // (jobs * 8))
    with ProcessPoolExecutor(max_workers=jobs) as ex:
        return list(ex.map(fn, items, chunksize=chunk))


# ---------------------------------------------------------------------------
# CSV schema: header "cluster,y,x1,...,xp"; rows grouped by contiguous cluster id


def read_csv(path, family="binary_logit"):
    """Parse a clustered dataset, validating schema and family-specific responses."""
    model = get_model(family)
    with open(path, "r", encoding="utf-8") as fh:
        lines = fh.read().split("\n")
    if lines and lines[-1] == "":
        lines.pop()
    if not lines:
        raise CsvFormatError(1, "empty file")
    header = lines[0].split(",")
    if len(header) < 3 or header[0] != "cluster" or header[1] != "y":
        raise CsvFormatError(1, "header must be 'cluster,y,x1,...,xp'")
    p = len(header) - 2
    for j, name in enumerate(header[2:], start=1):
        if name != f"x{j}":
            raise CsvFormatError(1, f"covariate column {j} must be named x{j}, got {name!r}")
    groups = []
    seen = set()
    current = None
    ys, xs = [], []
    for ln, line in enumerate(lines[1:], start=2):
        parts = line.split(",")
        if len(parts) != p + 2:
            raise CsvFormatError(ln, f"expected {p + 2} fields, got {len(parts)}")
        cid = parts[0]
        try:
            y = float(parts[1])
            row = [float(v) for v in parts[2:]]
        except ValueError as err:
            raise CsvFormatError(ln, f"could not parse number: {err}") from None
        if family == "binary_logit" and y not in (0.0, 1.0):
            raise CsvFormatError(ln, f"response {parts[1]} is not binary")
        if family == "poisson_log" and (y < 0 or y != float(int(y))):
            raise CsvFormatError(ln, f"response {parts[1]} is not a nonnegative count")
        if cid != current:
            if cid in seen:
                raise CsvFormatError(ln, f"cluster id {cid!r} is not contiguous")
            if current is not None:
                groups.append((ys, xs))
            seen.add(cid)
            current = cid
            ys, xs = [], []
        ys.append(y)
        xs.append(row)
    if current is None:
        raise CsvFormatError(2, "no data rows")
    groups.append((ys, xs))
    clusters = [ClusterObservation(np.array(y), np.array(x)) for y, x in groups]
    data = ClusteredDataset(clusters)
    return data, model


def write_csv(path, data: ClusteredDataset):
    """Serialize a dataset in the input schema with exact float round-trip."""
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("cluster,y," + ",".join(f"x{j}" for j in range(1, data.p + 1)) + "\n")
        for i, c in enumerate(data.clusters, start=1):
            for j in range(c.m):
                vals = ",".join(repr(float(v)) for v in c.X[j])
                fh.write(f"{i},{_fmt(c.y[j])},{vals}\n")


def _fmt(x):
    return repr(float(x))


# ---------------------------------------------------------------------------
# regularity diagnostics


@dataclass(frozen=True)
class RegularityReport:
    design_eig_min: float
    design_eig_max: float
    max_covariate_norm: float
    covariate_norm_ratio: float   # max row norm / sqrt(p)
    marginal_prob_range: Optional[tuple]
    corr_eig_min: Optional[float]
    flags: tuple


def check_regularity(data: ClusteredDataset, fit: Optional[FitResult] = None) -> RegularityReport:
    """Observable surrogates for the design and correlation regularity conditions.

    Reports the extreme eigenvalues of the average design Gram matrix, the
    largest covariate row norm (and its ratio to sqrt(p)), the fitted mean
    range when a fit is supplied, and the smallest eigenvalue of the final
    working correlation.
    """
    p = data.p
    G = np.zeros((p, p))
    max_norm = 0.0
    for g in data.groups():
        Xf = g.X.reshape(-1, p)
        G += Xf.T @ Xf
        max_norm = max(max_norm, float(np.sqrt((Xf * Xf).sum(axis=1).max())))
    G /= data.n
    lo, hi = eigen_extremes(0.5 * (G + G.T))
    flags = []
    if lo <= 1e-6:
        flags.append("design_near_singular")
    prange = None
    corr_min = None
    if fit is not None:
        model = get_model(fit.family)
        mus = []
        for g in data.groups():
            mus.append(model.mean(g.X @ fit.beta_hat).ravel())
        mu = np.concatenate(mus)
        prange = (float(mu.min()), float(mu.max()))
        if fit.family == "binary_logit" and (
            prange[0] < 1e-4 or prange[1] > 1.0 - 1e-4
        ):
            flags.append("extreme_fitted_probabilities")
        m_big = max(g.m for g in data.groups())
        corr_min = float(eigen_extremes(fit.structure_final.matrix(m_big))[0])
        if corr_min <= 1e-6:
            flags.append("correlation_near_singular")
    return RegularityReport(
        design_eig_min=lo,
        design_eig_max=hi,
        max_covariate_norm=max_norm,
        covariate_norm_ratio=max_norm / np.sqrt(p),
        marginal_prob_range=prange,
        corr_eig_min=corr_min,
        flags=tuple(flags),
    )


# ---------------------------------------------------------------------------
# single-fit report


def fit_csv(input_path, family, structure_kind, options: FitOptions = FitOptions(),
            alpha: float = 0.05):
    """Fit one CSV file and render a key-value report with stable field order."""
    data, model = read_csv(input_path, family)
    fit = fit_gee(data, model, structure_kind, options)
    lines = [
        ("report", "geehd_fit"),
        ("family", family),
        ("structure", structure_kind),
        ("n_clusters", data.n),
        ("p", data.p),
        ("m_common", data.m_common if data.m_common is not None else "ragged"),
        ("converged", str(fit.converged).lower()),
        ("iterations", fit.iterations),
        ("final_score_norm", _fmt(fit.final_score_norm)),
        ("alpha", _fmt(alpha)),
    ]
    tau = getattr(fit.structure_final, "tau", None)
    if tau is not None:
        lines.append(("tau_hat", _fmt(tau)))
    if fit.converged:
        ses = fit.standard_errors()
        for j in range(1, data.p + 1):
            lo, hi = confidence_interval(fit, j, alpha)
            lines.append((f"beta_{j}", _fmt(fit.beta_hat[j - 1])))
            lines.append((f"se_{j}", _fmt(ses[j - 1])))
            lines.append((f"ci_low_{j}", _fmt(lo)))
            lines.append((f"ci_high_{j}", _fmt(hi)))
    reg = check_regularity(data, fit if fit.converged else None)
    lines += [
        ("reg_design_eig_min", _fmt(reg.design_eig_min)),
        ("reg_design_eig_max", _fmt(reg.design_eig_max)),
        ("reg_max_covariate_norm", _fmt(reg.max_covariate_norm)),
        ("reg_covariate_norm_ratio", _fmt(reg.covariate_norm_ratio)),
    ]
    if reg.marginal_prob_range is not None:
        lines.append(("reg_prob_min", _fmt(reg.marginal_prob_range[0])))
        lines.append(("reg_prob_max", _fmt(reg.marginal_prob_range[1])))
    if reg.corr_eig_min is not None:
        lines.append(("reg_corr_eig_min", _fmt(reg.corr_eig_min)))
    lines.append(("reg_flags", ";".join(reg.flags) if reg.flags else "none"))
    report = "\n".join(f"{k} = {v}" for k, v in lines) + "\n"
    return report, fit


# ---------------------------------------------------------------------------
# studies


@dataclass(frozen=True)
class StudyConfig:
    """One study run: which statistic to collect, over which designs."""

    study: str                       # mse | sandwich | wald
    design: SimDesign                # template carrying everything but (n, p)
    rows: tuple                      # ((n, p), ...) study grid
    structures: tuple
    output_path: str
    parallelism: int = 1
    alpha: float = 0.05

    def __post_init__(self):
        if self.study not in ("mse", "sandwich", "wald"):
            raise ValueError(f"unknown study {self.study!r}")
        if self.study == "mse" and not self.structures:
            raise ValueError("mse study needs at least one working structure")
        if self.design.replications < 1:
            raise ValueError("studies need replications >= 1")


def _design_for(config: StudyConfig, n, p, pattern=None):
    return SimDesign(
        n=n,
        p_override=p,
        m=config.design.m,
        covariate_variance=config.design.covariate_variance,
        covariate_rho=config.design.covariate_rho,
        response_rho=config.design.response_rho,
        beta_pattern=pattern if pattern is not None else config.design.beta_pattern,
        replications=config.design.replications,
        seed=config.design.seed,
        invalid_policy=config.design.invalid_policy,
        max_regen_rate=config.design.max_regen_rate,
    )


def _mse_replication(design, structures, rep):
    data, beta0, diag = gen_dataset(design, rep)
    out = {}
    for kind in structures:
        fit = fit_gee(data, get_model("binary_logit"), kind)
        out[kind] = float(((fit.beta_hat - beta0) ** 2).sum() / design.p) if fit.converged else None
    return rep, out, diag.clusters_regenerated


def run_mse_study(config: StudyConfig):
    """Average normalized squared estimation error per (n, structure), times 10."""
    reps = config.design.replications
    rows = []
    for n, p in config.rows:
        design = _design_for(config, n, p)
        fn = partial(_mse_replication, design, tuple(config.structures))
        results = parallel_map(fn, range(reps), config.parallelism)
        results.sort(key=lambda t: t[0])
        regen = sum(r[2] for r in results)
        for kind in config.structures:
            values = [r[1][kind] for r in results]
            excluded = sum(v is None for v in values)
            if excluded > EXCLUDE_LIMIT * reps:
                raise StudyAbortedError(
                    f"{excluded} of {reps} replications failed to converge "
                    f"for structure {kind} at n={n}"
                )
            kept = [v for v in values if v is not None]
            rows.append(
                {
                    "structure": kind,
                    "n": n,
                    "p": p,
                    "avg_mse_x10": 10.0 * float(np.mean(kept)),
                    "replications": reps - excluded,
                    "excluded": excluded,
                    "regen_rate": regen / (reps * n),
                }
            )
    _write_rows(
        config.output_path,
        ["structure", "n", "p", "avg_mse_x10", "replications", "excluded", "regen_rate"],
        rows,
    )
    return rows


def _sandwich_replication(design, kind, coef_idx, rep):
    data, beta0, diag = gen_dataset(design, rep)
    fit = fit_gee(data, get_model("binary_logit"), kind)
    if not fit.converged:
        return rep, None, None, diag.clusters_regenerated
    ses = fit.standard_errors()
    sel = np.array(coef_idx) - 1
    return rep, fit.beta_hat[sel].copy(), ses[sel].copy(), diag.clusters_regenerated


def selected_coefficients(p):
    """The reported coefficient positions: k, 2k, 3k, p with k = floor(p / 4)."""
    k = p // 4
    return (k, 2 * k, 3 * k, p)


def run_sandwich_study(config: StudyConfig):
    """Monte Carlo sd of selected coefficients vs the average sandwich standard error."""
    ((n, p),) = config.rows
    kind = config.structures[0]
    design = _design_for(config, n, p)
    coef_idx = selected_coefficients(p)
    reps = config.design.replications
    fn = partial(_sandwich_replication, design, kind, coef_idx)
    results = parallel_map(fn, range(reps), config.parallelism)
    results.sort(key=lambda t: t[0])
    excluded = sum(r[1] is None for r in results)
    if excluded > EXCLUDE_LIMIT * reps:
        raise StudyAbortedError(f"{excluded} of {reps} replications failed to converge")
    betas = np.array([r[1] for r in results if r[1] is not None])
    ses = np.array([r[2] for r in results if r[2] is not None])
    regen = sum(r[3] for r in results)
    labels = ("k", "2k", "3k", "p")
    rows = []
    for pos, (label, j) in enumerate(zip(labels, coef_idx)):
        sd = float(betas[:, pos].std(ddof=1)) if betas.shape[0] > 1 else 0.0
        rows.append(
            {
                "coefficient": label,
                "index": j,
                "n": n,
                "p": p,
                "SD": sd,
                "SD2": float(ses[:, pos].mean()),
                "replications": reps - excluded,
                "excluded": excluded,
                "regen_rate": regen / (reps * n),
            }
        )
    _write_rows(
        config.output_path,
        ["coefficient", "index", "n", "p", "SD", "SD2", "replications", "excluded", "regen_rate"],
        rows,
    )
    return rows


def _wald_replication(design, kind, null_idx, rep):
    data, beta0, diag = gen_dataset(design, rep)
    fit = fit_gee(data, get_model("binary_logit"), kind)
    if not fit.converged:
        return rep, None, None, diag.clusters_regenerated
    L = np.zeros((len(null_idx), design.p))
    for r, j in enumerate(null_idx):
        L[r, j - 1] = 1.0
    w = wald_test(fit, Hypothesis(L))
    z = high_dim_test(fit, beta0)
    return rep, float(w.statistic), float(z.z), diag.clusters_regenerated


def run_wald_study(config: StudyConfig):
    """Null-distribution samples of the fixed-rank and full-vector test statistics.

    Emits one CSV row per replication plus a key-value summary file at
    ``<output_path>.summary`` holding the sample moments and the
    Kolmogorov-Smirnov comparison of the fixed-rank statistic with its
    reference chi-square law.
    """
    ((n, p),) = config.rows
    kind = config.structures[0]
    design = _design_for(config, n, p, pattern="blocks_with_nulls")
    beta0 = design.beta()
    null_idx = tuple(j + 1 for j in range(p) if beta0[j] == 0.0)
    reps = config.design.replications
    fn = partial(_wald_replication, design, kind, null_idx)
    results = parallel_map(fn, range(reps), config.parallelism)
    results.sort(key=lambda t: t[0])
    excluded = sum(r[1] is None for r in results)
    if excluded > EXCLUDE_LIMIT * reps:
        raise StudyAbortedError(f"{excluded} of {reps} replications failed to converge")
    rows = [
        {"replication": r[0], "W": r[1], "z_highdim": r[2]}
        for r in results
        if r[1] is not None
    ]
    _write_rows(config.output_path, ["replication", "W", "z_highdim"], rows)
    W = np.array([r["W"] for r in rows])
    z = np.array([r["z_highdim"] for r in rows])
    df = len(null_idx)
    ks = _scipy_stats.kstest(W, "chi2", args=(df,))
    summary = {
        "study": "wald",
        "n": n,
        "p": p,
        "structure": kind,
        "df": df,
        "replications": reps - excluded,
        "excluded": excluded,
        "mean_W": float(W.mean()),
        "var_W": float(W.var(ddof=1)),
        "ks_stat": float(ks.statistic),
        "ks_pvalue": float(ks.pvalue),
        "mean_z": float(z.mean()),
        "sd_z": float(z.std(ddof=1)),
    }
    with open(config.output_path + ".summary", "w", encoding="utf-8", newline="\n") as fh:
        for key, val in summary.items():
            fh.write(f"{key} = {_fmt(val) if isinstance(val, float) else val}\n")
    return rows, summary


def run_study(config: StudyConfig):
    if config.study == "mse":
        return run_mse_study(config)
    if config.study == "sandwich":
        return run_sandwich_study(config)
    return run_wald_study(config)


def _write_rows(path, columns, rows):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(",".join(columns) + "\n")
        for row in rows:
            fh.write(
                ",".join(
                    _fmt(row[c]) if isinstance(row[c], float) else str(row[c])
                    for c in columns
                )
                + "\n"
            )


# ---------------------------------------------------------------------------
# key-value config files (flags override file values in the CLI)


def parse_kv_file(path):
    out = {}
    with open(path, "r", encoding="utf-8") as fh:
        for ln, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise CsvFormatError(ln, f"expected 'key = value', got {line!r}")
            key, val = line.split("=", 1)
            out[key.strip()] = val.strip()
    return out
