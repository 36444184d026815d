"""Command-line interface: single-file fits, dataset simulation, and studies.

Exit codes: 0 success, 2 parse/validation error, 3 convergence failure,
4 study aborted (exclusion or validity budget exceeded).
"""

from __future__ import annotations

import argparse
import sys

from .estimator import FitOptions
from .harness import (
    EXIT_ABORTED,
    EXIT_CONVERGENCE,
    EXIT_OK,
    EXIT_PARSE,
    CsvFormatError,
    StudyAbortedError,
    StudyConfig,
    default_jobs,
    fit_csv,
    parse_kv_file,
    run_study,
    write_csv,
)
from .simulate import SimDesign, ValidityRateError, gen_dataset, pn_rule

STRUCTURE_ALIASES = {
    "in": "independence",
    "independence": "independence",
    "cs": "exchangeable",
    "exchangeable": "exchangeable",
    "ar1": "ar1",
    "un": "unstructured",
    "unstructured": "unstructured",
}

DEFAULT_STRUCTURES = {
    "mse": "in,un,cs,ar1",
    "sandwich": "un",
    "wald": "cs",
}


def _structures(spec):
    kinds = []
    for tok in spec.split(","):
        tok = tok.strip().lower()
        if tok not in STRUCTURE_ALIASES:
            raise ValueError(f"unknown working correlation {tok!r}")
        kinds.append(STRUCTURE_ALIASES[tok])
    return tuple(kinds)


def _int_list(spec):
    return tuple(int(tok) for tok in str(spec).split(",") if tok.strip())


def build_parser():
    ap = argparse.ArgumentParser(prog="geehd", description=__doc__)
    sub = ap.add_subparsers(dest="command", required=True)

    fit = sub.add_parser("fit", help="fit one CSV file and print a report")
    fit.add_argument("--input", required=True)
    fit.add_argument("--family", default="binary_logit",
                     choices=["binary_logit", "poisson_log"])
    fit.add_argument("--structure", default="cs")
    fit.add_argument("--alpha", type=float, default=0.05)
    fit.add_argument("--out", default=None)
    fit.set_defaults(func=cmd_fit)

    sim = sub.add_parser("simulate", help="generate one seeded dataset as CSV")
    sim.add_argument("--n", type=int, required=True)
    sim.add_argument("--p", type=int, default=None)
    sim.add_argument("--m", type=int, default=3)
    sim.add_argument("--seed", type=int, default=0)
    sim.add_argument("--rep", type=int, default=0)
    sim.add_argument("--pattern", default="blocks",
                     choices=["blocks", "blocks_with_nulls"])
    sim.add_argument("--covariate-variance", type=float, default=0.2)
    sim.add_argument("--covariate-rho", type=float, default=0.5)
    sim.add_argument("--response-rho", type=float, default=0.5)
    sim.add_argument("--invalid-policy", default="regenerate",
                     choices=["regenerate", "clamp", "truncate"])
    sim.add_argument("--max-regen-rate", type=float, default=1.0)
    sim.add_argument("--out", required=True)
    sim.set_defaults(func=cmd_simulate)

    st = sub.add_parser("study", help="run a seeded replication study")
    st.add_argument("kind", choices=["mse", "sandwich", "wald"])
    st.add_argument("--config", default=None,
                    help="key = value file mirroring the study options; flags override")
    st.add_argument("--n", default=None, help="sample size(s), comma separated")
    st.add_argument("--p", default=None,
                    help="covariate dimension(s) matching --n; default from the dimension rule")
    st.add_argument("--reps", type=int, default=None)
    st.add_argument("--seed", type=int, default=None)
    st.add_argument("--structure", default=None, help="working correlation(s), comma separated")
    st.add_argument("--m", type=int, default=None)
    st.add_argument("--alpha", type=float, default=None)
    st.add_argument("--covariate-variance", type=float, default=None)
    st.add_argument("--covariate-rho", type=float, default=None)
    st.add_argument("--response-rho", type=float, default=None)
    st.add_argument("--invalid-policy", default=None,
                    choices=["regenerate", "clamp", "truncate"])
    st.add_argument("--max-regen-rate", type=float, default=None)
    st.add_argument("--jobs", type=int, default=None)
    st.add_argument("--out", default=None)
    st.set_defaults(func=cmd_study)

    return ap


def cmd_fit(args):
    (kind,) = _structures(args.structure)
    report, fit = fit_csv(args.input, args.family, kind, FitOptions(), args.alpha)
    if args.out:
        with open(args.out, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(report)
    else:
        sys.stdout.write(report)
    return EXIT_OK if fit.converged else EXIT_CONVERGENCE


def cmd_simulate(args):
    design = SimDesign(
        n=args.n,
        p_override=args.p,
        m=args.m,
        covariate_variance=args.covariate_variance,
        covariate_rho=args.covariate_rho,
        response_rho=args.response_rho,
        beta_pattern=args.pattern,
        seed=args.seed,
        invalid_policy=args.invalid_policy,
        max_regen_rate=args.max_regen_rate,
    )
    data, beta0, diag = gen_dataset(design, args.rep)
    write_csv(args.out, data)
    sys.stderr.write(
        f"wrote {data.n} clusters (m={design.m}, p={design.p}) to {args.out}; "
        f"{diag.clusters_regenerated} clusters regenerated\n"
    )
    return EXIT_OK


def _study_value(args, cfg, key, cast, default):
    flag = getattr(args, key, None)
    if flag is not None:
        return flag
    if key in cfg:
        return cast(cfg[key])
    return default


def cmd_study(args):
    cfg = parse_kv_file(args.config) if args.config else {}
    kind = args.kind
    ns = _int_list(args.n if args.n is not None else cfg.get("n", ""))
    if not ns:
        ns = (1000,) if kind in ("sandwich", "wald") else (500,)
    p_spec = args.p if args.p is not None else cfg.get("p", "")
    ps = _int_list(p_spec) if str(p_spec).strip() else tuple(pn_rule(n) for n in ns)
    if len(ps) != len(ns):
        raise ValueError("--p must list one dimension per --n entry")
    if kind in ("sandwich", "wald") and len(ns) != 1:
        raise ValueError(f"{kind} study uses a single sample size")
    reps = _study_value(args, cfg, "reps", int, 500)
    seed = _study_value(args, cfg, "seed", int, 0)
    m = _study_value(args, cfg, "m", int, 3)
    alpha = _study_value(args, cfg, "alpha", float, 0.05)
    jobs = _study_value(args, cfg, "jobs", int, default_jobs())
    out = args.out if args.out is not None else cfg.get("out")
    if not out:
        raise ValueError("--out (or config key 'out') is required for studies")
    struct_spec = args.structure if args.structure is not None else cfg.get(
        "structures", DEFAULT_STRUCTURES[kind]
    )
    design = SimDesign(
        n=ns[0],
        p_override=ps[0],
        m=m,
        covariate_variance=_study_value(args, cfg, "covariate_variance", float, 0.2),
        covariate_rho=_study_value(args, cfg, "covariate_rho", float, 0.5),
        response_rho=_study_value(args, cfg, "response_rho", float, 0.5),
        replications=reps,
        seed=seed,
        invalid_policy=_study_value(args, cfg, "invalid_policy", str, "regenerate"),
        max_regen_rate=_study_value(args, cfg, "max_regen_rate", float, 1.0),
    )
    config = StudyConfig(
        study=kind,
        design=design,
        rows=tuple(zip(ns, ps)),
        structures=_structures(struct_spec),
        output_path=out,
        parallelism=jobs,
        alpha=alpha,
    )
    run_study(config)
    sys.stderr.write(f"study {kind} written to {out}\n")
    return EXIT_OK


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except CsvFormatError as err:
        sys.stderr.write(f"error: {err}\n")
        return EXIT_PARSE
    except (StudyAbortedError, ValidityRateError) as err:
        sys.stderr.write(f"aborted: {err}\n")
        return EXIT_ABORTED
    except (ValueError, OSError) as err:
        sys.stderr.write(f"error: {err}\n")
        return EXIT_PARSE


if __name__ == "__main__":
    sys.exit(main())
