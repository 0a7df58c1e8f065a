"""Command-line surface: simulate, fit, baselines, sensitivity, bootstrap.

Exit codes: 0 success, 2 validation error, 3 fit non-convergence,
4 partial failure (some bootstrap or grid units failed).
"""

from __future__ import annotations

import argparse
import os
import sys
from dataclasses import replace

import numpy as np

from . import baselines as bl
from .em import EStepError, FitConfig, fit_em, tabulate_observed
from .estimands import (
    WEIGHTINGS,
    BootstrapConfig,
    bootstrap_ci,
    cace_table,
    compliance_proportions,
    weighted_cace,
)
from .io import ConfigError, RunConfig, load_config, read_dataset, render_table, write_dataset, write_table
from .model import ModelError
from .sensitivity import sensitivity_grid
from .simulation import SINGLE_COV_SPEC, StudyConfig, generate, run_study, scenario_params

EXIT_OK = 0
EXIT_VALIDATION = 2
EXIT_NO_CONVERGENCE = 3
EXIT_PARTIAL = 4


class CliError(ValueError):
    pass


def _default_workers() -> int:
    return int(os.environ.get("IVCACE_WORKERS", "1"))


def _parse_cells(text: str):
    # cells separated by commas, codes within a cell by colons: "1:2,3:1"
    cells = []
    for part in text.split(","):
        part = part.strip()
        if not part:
            continue
        cells.append(tuple(int(v) for v in part.split(":")))
    if not cells:
        raise CliError("no cells parsed from --cells")
    return cells


def _load(args) -> RunConfig:
    cfg = load_config(args.config) if args.config else RunConfig()
    if getattr(args, "seed", None) is not None:
        cfg.seed = args.seed
    return cfg


def _require_spec(cfg: RunConfig):
    if cfg.spec is None:
        raise CliError("a config file with a 'covariates' section is required")
    return cfg.spec


def _read_data(args, spec, cfg):
    if not args.data:
        raise CliError("--data is required")
    return read_dataset(args.data, spec, na_token=cfg.na_token)


def cmd_simulate(args) -> int:
    cfg = _load(args)
    if args.n is not None and args.n < 1:
        raise CliError("--n must be >= 1")
    sc = scenario_params(args.scenario)
    if args.study:
        study = StudyConfig(
            n_replications=args.reps,
            n_per_dataset=args.n or 5000,
            scenario=args.scenario,
            methods=tuple(args.methods.split(",")) if args.methods else ("em_ni", "complete_case", "mar_impute"),
            seed=cfg.seed,
            n_workers=args.workers,
        )
        result = run_study(study)
        rows = [
            {
                "method": r.method, "x": r.x, "mean": r.mean, "sd": r.sd,
                "pct_bias": r.pct_bias, "truth": r.truth,
            }
            for r in result.rows
        ]
        if args.out:
            write_table(args.out, rows)
        print(render_table(rows))
        return EXIT_OK
    ds = generate(sc, args.n or 5000, cfg.seed)
    if not args.out:
        raise CliError("--out is required when writing a dataset")
    write_dataset(args.out, ds, SINGLE_COV_SPEC, na_token=cfg.na_token)
    print(f"wrote {len(ds)} records to {args.out}")
    return EXIT_OK


def cmd_fit(args) -> int:
    cfg = _load(args)
    spec = _require_spec(cfg)
    ds = _read_data(args, spec, cfg)
    counts = tabulate_observed(ds, spec)
    for p, t in sorted(counts.tables.items()):
        print(f"missingness pattern {p}: {int(t.sum())} records")
    fit = fit_em(ds, spec, cfg.fit)
    cells = _parse_cells(args.cells) if args.cells else list(spec.cells())
    rows = [
        {"cell": ":".join(map(str, c)), "cace": est} for c, est in cace_table(fit, cells)
    ]
    comp = [
        {
            "cell": ":".join(map(str, r.cell)),
            "p_always": r.p_always, "p_complier": r.p_complier, "p_never": r.p_never,
        }
        for r in compliance_proportions(fit, cells)
    ]
    print(f"log-likelihood {fit.loglik:.6f} after {fit.iterations} iterations"
          f" (converged: {fit.converged})")
    print(render_table(rows))
    print(render_table(comp))
    for w in WEIGHTINGS:
        print(f"weighted cace ({w}): {weighted_cace(fit, w):.6f}")
    if args.out:
        write_table(args.out, rows)
    return EXIT_OK if fit.converged else EXIT_NO_CONVERGENCE


_BASELINES = ("em_ni", "complete_case", "mar_impute", "unadjusted", "regression", "subclassification")


def cmd_baselines(args) -> int:
    cfg = _load(args)
    spec = _require_spec(cfg)
    ds = _read_data(args, spec, cfg)
    if args.methods is None:
        methods = list(_BASELINES)
    else:
        methods = [m for m in args.methods.split(",") if m]
    bad = set(methods) - set(_BASELINES)
    if bad:
        raise CliError(f"unknown methods: {sorted(bad)}")
    rows, failures = [], 0
    for method in methods:
        try:
            if method == "em_ni":
                fit = fit_em(ds, spec, cfg.fit)
                rows.append({"method": method, "estimate": weighted_cace(fit),
                             "ci_low": "", "ci_high": ""})
            elif method == "complete_case":
                fit = bl.complete_case_fit(ds, spec, cfg.fit)
                rows.append({"method": method, "estimate": weighted_cace(fit),
                             "ci_low": "", "ci_high": ""})
            elif method == "mar_impute":
                pooled = bl.mar_impute_fit(ds, spec, cfg.fit, cfg.imputation)
                ests = [weighted_cace(f) for f in pooled.fits]
                rows.append({"method": method, "estimate": float(np.mean(ests)),
                             "ci_low": "", "ci_high": ""})
            else:
                fn = {
                    "unadjusted": lambda: bl.unadjusted_difference(ds),
                    "regression": lambda: bl.regression_adjusted(ds, spec, cfg.imputation),
                    "subclassification": lambda: bl.propensity_subclassification(ds, spec, cfg.imputation),
                }[method]
                r = fn()
                rows.append({"method": method, "estimate": r.estimate,
                             "ci_low": r.ci[0], "ci_high": r.ci[1]})
        except (ModelError, EStepError, RuntimeError) as exc:
            failures += 1
            print(f"method {method} failed: {exc}", file=sys.stderr)
    print(render_table(rows))
    if args.out:
        write_table(args.out, rows)
    return EXIT_PARTIAL if failures else EXIT_OK


def cmd_sensitivity(args) -> int:
    cfg = _load(args)
    spec = _require_spec(cfg)
    ds = _read_data(args, spec, cfg)
    base_fit = fit_em(ds, spec, cfg.fit)
    base_report = None
    if args.resamples:
        boot = replace(cfg.bootstrap, n_resamples=args.resamples, seed=cfg.seed,
                       n_workers=args.workers)
        cells = cfg.grid.cells or tuple(spec.cells())
        base_report = bootstrap_ci(ds, spec, cfg.fit, boot, cells=cells)
    rows = sensitivity_grid(ds, spec, cfg.grid, cfg.fit, base_report, base_fit=base_fit)
    out_rows = [
        {
            "cell": ":".join(map(str, r.cell)), "pi": r.pi,
            "exp_xi": r.outcome_or, "exp_kappa": r.response_or,
            "estimate": r.estimate, "ci_low": r.ci_low, "ci_high": r.ci_high,
            "flip_flag": r.flip,
        }
        for r in rows
    ]
    print(render_table(out_rows))
    if args.out:
        write_table(args.out, out_rows)
    return EXIT_PARTIAL if any(r.failed for r in rows) else EXIT_OK


def cmd_bootstrap(args) -> int:
    cfg = _load(args)
    spec = _require_spec(cfg)
    ds = _read_data(args, spec, cfg)
    if args.resamples is not None and args.resamples < 1:
        raise CliError("--resamples must be >= 1")
    boot = cfg.bootstrap
    if args.resamples is not None:
        boot = replace(boot, n_resamples=args.resamples)
    boot = replace(boot, seed=cfg.seed, n_workers=args.workers)
    cells = _parse_cells(args.cells) if args.cells else None
    report = bootstrap_ci(ds, spec, cfg.fit, boot, cells=cells)
    rows = [
        {
            "target": ":".join(map(str, r.cell)), "estimate": r.estimate,
            "sd": r.sd, "ci_low": r.lower, "ci_high": r.upper,
        }
        for r in report.rows
    ] + [
        {"target": w, "estimate": r.estimate, "sd": r.sd,
         "ci_low": r.lower, "ci_high": r.upper}
        for w, r in report.weighted.items()
    ]
    print(render_table(rows))
    if args.out:
        write_table(args.out, rows)
    return EXIT_PARTIAL if report.n_dropped else EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ivcace")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config")
        p.add_argument("--data")
        p.add_argument("--out")
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--workers", type=int, default=_default_workers())

    p = sub.add_parser("simulate")
    common(p)
    p.add_argument("--scenario", default="mcar")
    p.add_argument("--n", type=int, default=None)
    p.add_argument("--reps", type=int, default=500)
    p.add_argument("--study", action="store_true")
    p.add_argument("--methods")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("fit")
    common(p)
    p.add_argument("--cells")
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("baselines")
    common(p)
    p.add_argument("--methods")
    p.set_defaults(func=cmd_baselines)

    p = sub.add_parser("sensitivity")
    common(p)
    p.add_argument("--resamples", type=int, default=0)
    p.set_defaults(func=cmd_sensitivity)

    p = sub.add_parser("bootstrap")
    common(p)
    p.add_argument("--resamples", type=int, default=None)
    p.add_argument("--cells")
    p.set_defaults(func=cmd_bootstrap)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (CliError, ConfigError, ModelError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except EStepError as exc:
        print(f"fit failed: {exc}", file=sys.stderr)
        return EXIT_NO_CONVERGENCE


if __name__ == "__main__":
    sys.exit(main())
