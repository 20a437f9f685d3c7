"""Command-line interface.

Subcommands: simulate | estimate | baseline | rank-check | run | sweep.

Exit codes: 0 success, 1 validation/usage error, 2 runtime error (missing
files, coverage failures, ...). With --json, errors additionally appear as
one JSON object on stderr. Configuration precedence is CLI flag > plan file
> built-in default; environment variables are deliberately not consulted.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys

import numpy as np

from .baselines import BilevelModel, FourStepModel, TauGrid
from .dataset import CsvSchema, Evidence, load_csv, standardize_covariates, write_csv
from .errors import (
    CoverageError,
    DegenerateInputError,
    ParseError,
    RankcfError,
    SchemaError,
    ValidationError,
)
from .estimator import build_profile_continuous, estimate_units, minimize_profile
from .harness import ExperimentPlan, load_plan, run_experiment, sweep
from .kernels import EPANECHNIKOV, GAUSSIAN, KernelSpec
from .propensity import PropensityOverride, fit_logistic, override_propensity, sigmoid
from .rank import kendall
from .simulator import SimConfig, simulate

_USAGE_ERRORS = (ValidationError, SchemaError, ParseError, DegenerateInputError)

# every long flag any subcommand consumes; the flag-registry test keeps this
# in lockstep with the parsers so --help never under-reports a flag
FLAGS_CONSUMED = frozenset(
    {
        "--m", "--n", "--alpha", "--rho", "--beta", "--seed", "--split-ratios",
        "--out", "--json", "--dataset", "--queries", "--kernel", "--bandwidth",
        "--mode", "--treatment-kernel", "--treatment-bandwidth", "--standardize",
        "--threads", "--treatment-col", "--outcome-col", "--covariate-cols",
        "--split-col", "--propensity", "--l2", "--clip", "--manifest",
        "--method", "--tau-step", "--iterations", "--input", "--plan",
        "--axis", "--values",
    }
)


class _UsageExit(Exception):
    def __init__(self, message: str):
        super().__init__(message)


class _Parser(argparse.ArgumentParser):
    """argparse that reports usage problems as exit code 1, not 2."""

    def error(self, message):
        raise _UsageExit(f"{self.prog}: {message}\n{self.format_usage()}")


def _float_repr(v: float) -> str:
    return repr(float(v))


def _schema_flags(sub) -> None:
    sub.add_argument("--treatment-col", default="x", help="treatment column name")
    sub.add_argument("--outcome-col", default="y", help="outcome column name")
    sub.add_argument(
        "--covariate-cols",
        default=None,
        help="comma-separated covariate columns (default: all remaining)",
    )
    sub.add_argument("--split-col", default=None, help="split column name, if present")


def _schema_from_args(args) -> CsvSchema:
    cov = tuple(c for c in args.covariate_cols.split(",") if c) if args.covariate_cols else None
    return CsvSchema(
        treatment=args.treatment_col,
        outcome=args.outcome_col,
        covariates=cov,
        split=args.split_col,
    )


def _propensity_flags(sub) -> None:
    sub.add_argument(
        "--propensity",
        default="logistic",
        help="logistic | oracle | scaled:c0,c1 (oracle/scaled need --manifest)",
    )
    sub.add_argument("--l2", type=float, default=1e-4, help="logistic L2 strength")
    sub.add_argument("--clip", type=float, default=0.01, help="propensity clip floor")
    sub.add_argument("--manifest", default=None, help="manifest.json from `simulate`")


def _resolve_propensity(args, dataset):
    spec = args.propensity
    if spec == "logistic":
        return fit_logistic(dataset, l2=args.l2, clip=args.clip).as_function()
    if args.manifest is None:
        raise ValidationError(f"propensity {spec!r} needs --manifest from `simulate`")
    with open(args.manifest, encoding="utf-8") as fh:
        manifest = json.load(fh)
    wx = np.asarray(manifest["wx"], dtype=float)

    def oracle(z, arm):
        p1 = sigmoid(np.atleast_2d(np.asarray(z, dtype=float)) @ wx)
        return p1 if int(arm) == 1 else 1.0 - p1

    if spec == "oracle":
        return oracle
    if spec.startswith("scaled:"):
        parts = spec.split(":", 1)[1].split(",")
        if len(parts) != 2:
            raise ValidationError("scaled propensity takes two factors: scaled:c0,c1")
        override = PropensityOverride(
            mode="scaled", scale_factors=(float(parts[0]), float(parts[1]))
        )
        return override_propensity(oracle, override)
    raise ValidationError(f"unknown propensity {spec!r}")


def _load_queries(path, dataset):
    """Read a queries CSV with columns x, y, x_prime plus covariates."""
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = [c.strip() for c in next(reader)]
        except StopIteration:
            raise SchemaError(f"{path}: empty queries file") from None
        rows = list(reader)
    for required in ("x", "y", "x_prime"):
        if required not in header:
            raise SchemaError(f"{path}: queries need column {required!r}")
    cov_names = [c for c in header if c not in ("x", "y", "x_prime")]
    if len(cov_names) != dataset.m:
        raise SchemaError(
            f"{path}: {len(cov_names)} covariate columns but dataset has {dataset.m}"
        )
    idx = {name: i for i, name in enumerate(header)}
    n = len(rows)
    x = np.empty(n)
    y = np.empty(n)
    xp = np.empty(n)
    z = np.empty((n, dataset.m))
    for r, row in enumerate(rows):
        try:
            x[r] = float(row[idx["x"]])
            y[r] = float(row[idx["y"]])
            xp[r] = float(row[idx["x_prime"]])
            for j, c in enumerate(cov_names):
                z[r, j] = float(row[idx[c]])
        except (ValueError, IndexError):
            raise ParseError(f"{path}: row {r}: unparsable query") from None
    return x, z, y, xp


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------


def _cmd_simulate(args) -> int:
    config = SimConfig(
        m=args.m,
        n=args.n,
        alpha=args.alpha,
        rho=args.rho,
        beta=args.beta,
        seed=args.seed,
        split_ratios=tuple(float(v) for v in args.split_ratios.split(",")),
    )
    dataset, table, truth = simulate(config)
    os.makedirs(args.out, exist_ok=True)
    write_csv(os.path.join(args.out, "dataset.csv"), dataset)
    with open(os.path.join(args.out, "potential_outcomes.csv"), "w", newline="",
              encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["y0", "y1"])
        for y0, y1 in zip(table.y0, table.y1):
            writer.writerow([_float_repr(y0), _float_repr(y1)])
    manifest = {
        "config": config.to_dict(),
        "wx": [float(v) for v in truth.wx],
        "wy": [float(v) for v in truth.wy],
        "wy1": [float(v) for v in truth.wy1],
        "seed": config.seed,
    }
    with open(os.path.join(args.out, "manifest.json"), "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return 0


def _cmd_estimate(args) -> int:
    dataset = load_csv(args.dataset, _schema_from_args(args), treatment_mode=args.mode)
    if args.standardize:
        dataset, mu, sd = standardize_covariates(dataset)
    x, z, y, xp = _load_queries(args.queries, dataset)
    if args.standardize:
        z = (z - mu) / sd
    pool = dataset.subset(dataset.split_mask("train"))
    header = ["y_hat", "bounded", "coverage_ok", "n_effective"]
    if args.mode == "continuous":
        kernel_z = KernelSpec(family=args.kernel, bandwidth=args.bandwidth)
        kernel_x = KernelSpec(
            family=args.treatment_kernel, bandwidth=args.treatment_bandwidth
        )
        records = []
        for k in range(len(x)):
            ev = Evidence(x=x[k], z=z[k], y=y[k], x_prime=xp[k])
            try:
                profile = build_profile_continuous(pool, ev, kernel_z, kernel_x)
                est = minimize_profile(profile)
                records.append(
                    [
                        _float_repr(est.y_hat),
                        str(est.bounded),
                        str(est.coverage_ok),
                        _float_repr(est.n_effective_target_arm),
                    ]
                )
            except CoverageError:
                records.append(["nan", "False", "False", "nan"])
    else:
        prop = _resolve_propensity(args, dataset)
        kernel = KernelSpec(family=args.kernel, bandwidth=args.bandwidth)
        y_hat, bounded, coverage, n_eff = estimate_units(
            pool, x, z, y, xp, kernel, prop, threads=args.threads
        )
        records = [
            [
                _float_repr(y_hat[k]) if coverage[k] else "nan",
                str(bool(bounded[k])),
                str(bool(coverage[k])),
                _float_repr(n_eff[k]) if coverage[k] else "nan",
            ]
            for k in range(len(x))
        ]
    with open(args.out, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        writer.writerows(records)
    return 0


def _cmd_baseline(args) -> int:
    dataset = load_csv(args.dataset, _schema_from_args(args))
    x, z, y, xp = _load_queries(args.queries, dataset)
    grid = TauGrid.with_step(args.tau_step)
    if args.method == "bilevel":
        model = BilevelModel(dataset, grid, iterations=args.iterations)
    else:
        prop = _resolve_propensity(args, dataset)
        model = FourStepModel(dataset, grid, prop, iterations=args.iterations)
    estimates = model.estimate(x, z, y, xp)
    with open(args.out, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["y_hat"])
        for v in estimates:
            writer.writerow([_float_repr(v)])
    return 0


def _cmd_rank_check(args) -> int:
    with open(args.input, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            raise SchemaError(f"{args.input}: empty file")
        rows = list(reader)
    if len(header) < 2:
        raise SchemaError(f"{args.input}: need at least two columns")
    xs, ys = [], []
    for r, row in enumerate(rows):
        try:
            xs.append(float(row[0]))
            ys.append(float(row[1]))
        except (ValueError, IndexError):
            raise ParseError(f"{args.input}: row {r}: unparsable pair") from None
    report = kendall(xs, ys)
    print(json.dumps(report.to_dict(), sort_keys=True))
    return 0


def _cmd_run(args) -> int:
    plan = load_plan(args.plan)
    if args.seed is not None:
        plan = ExperimentPlan.from_dict({**plan.to_dict(), "seeds": [args.seed]})
    result = run_experiment(plan)
    os.makedirs(args.out, exist_ok=True)
    result.to_csv(os.path.join(args.out, "results.csv"))
    with open(os.path.join(args.out, "manifest.json"), "w", encoding="utf-8") as fh:
        json.dump(result.manifest(), fh, indent=2, sort_keys=True)
        fh.write("\n")
    return 0


def _cmd_sweep(args) -> int:
    plan = load_plan(args.plan)
    values: list = []
    for raw in args.values.split(","):
        raw = raw.strip()
        if args.axis == "kernel":
            values.append(raw)
        else:
            values.append(float(raw))
    result = sweep(args.axis, values, plan)
    os.makedirs(args.out, exist_ok=True)
    result.to_csv(os.path.join(args.out, "results.csv"))
    with open(os.path.join(args.out, "manifest.json"), "w", encoding="utf-8") as fh:
        json.dump(result.manifest(), fh, indent=2, sort_keys=True)
        fh.write("\n")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="rankcf", description=__doc__)
    subs = parser.add_subparsers(dest="command", required=True)

    sim = subs.add_parser("simulate", help="generate a synthetic dataset", parents=[])
    sim.add_argument("--m", type=int, default=5, help="covariate dimension")
    sim.add_argument("--n", type=int, default=10_000, help="sample count")
    sim.add_argument("--alpha", type=float, default=1.0, help="heterogeneity degree")
    sim.add_argument("--rho", type=float, default=0.0, help="covariate correlation base")
    sim.add_argument("--beta", type=float, default=0.0, help="rank-violation strength")
    sim.add_argument("--seed", type=int, default=0, help="generator seed")
    sim.add_argument(
        "--split-ratios", default="0.63,0.27,0.10", help="train,val,test ratios"
    )
    sim.add_argument("--out", required=True, help="output directory")
    sim.add_argument("--json", action="store_true", help="JSON errors on stderr")
    sim.set_defaults(func=_cmd_simulate)

    est = subs.add_parser("estimate", help="counterfactual estimates for queries")
    est.add_argument("--dataset", required=True, help="reference sample CSV")
    est.add_argument("--queries", required=True, help="queries CSV (x, z..., y, x_prime)")
    est.add_argument("--out", required=True, help="output CSV path")
    est.add_argument(
        "--kernel", choices=[EPANECHNIKOV, GAUSSIAN], default=GAUSSIAN,
        help="covariate kernel family",
    )
    est.add_argument("--bandwidth", type=float, default=1.0, help="covariate bandwidth")
    est.add_argument(
        "--mode", choices=["binary", "continuous"], default="binary",
        help="treatment mode (never inferred from data)",
    )
    est.add_argument(
        "--treatment-kernel", choices=[EPANECHNIKOV, GAUSSIAN], default=EPANECHNIKOV,
        help="treatment kernel family (continuous mode)",
    )
    est.add_argument(
        "--treatment-bandwidth", type=float, default=1.0,
        help="treatment bandwidth (continuous mode)",
    )
    est.add_argument(
        "--standardize", action="store_true",
        help="standardize covariates with train-split statistics",
    )
    est.add_argument("--threads", type=int, default=os.cpu_count() or 1,
                     help="query-chunk parallelism")
    est.add_argument("--json", action="store_true", help="JSON errors on stderr")
    _schema_flags(est)
    _propensity_flags(est)
    est.set_defaults(func=_cmd_estimate)

    base = subs.add_parser("baseline", help="quantile-regression baseline estimates")
    base.add_argument("--method", choices=["bilevel", "fourstep"], required=True)
    base.add_argument("--dataset", required=True, help="reference sample CSV")
    base.add_argument("--queries", required=True, help="queries CSV (x, z..., y, x_prime)")
    base.add_argument("--out", required=True, help="output CSV path")
    base.add_argument("--tau-step", type=float, default=0.05, help="quantile grid step")
    base.add_argument("--iterations", type=int, default=20_000,
                      help="subgradient iterations per fit")
    base.add_argument("--json", action="store_true", help="JSON errors on stderr")
    _schema_flags(base)
    _propensity_flags(base)
    base.set_defaults(func=_cmd_baseline)

    rank_p = subs.add_parser("rank-check", help="Kendall report for a two-column CSV")
    rank_p.add_argument("--input", required=True, help="two-column CSV")
    rank_p.add_argument("--json", action="store_true", help="JSON errors on stderr")
    rank_p.set_defaults(func=_cmd_rank_check)

    run_p = subs.add_parser("run", help="run an experiment plan")
    run_p.add_argument("--plan", required=True, help="plan JSON path")
    run_p.add_argument("--out", required=True, help="output directory")
    run_p.add_argument("--seed", type=int, default=None,
                       help="override the plan's seed list with one seed")
    run_p.add_argument("--json", action="store_true", help="JSON errors on stderr")
    run_p.set_defaults(func=_cmd_run)

    sweep_p = subs.add_parser("sweep", help="repeat a plan along one axis")
    sweep_p.add_argument("--plan", required=True, help="base plan JSON path")
    sweep_p.add_argument(
        "--axis", choices=["alpha", "bandwidth", "kernel", "rho", "beta"], required=True
    )
    sweep_p.add_argument("--values", required=True, help="comma-separated axis values")
    sweep_p.add_argument("--out", required=True, help="output directory")
    sweep_p.add_argument("--json", action="store_true", help="JSON errors on stderr")
    sweep_p.set_defaults(func=_cmd_sweep)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except _UsageExit as exc:
        _report_error(exc, argv, usage=True)
        return 1
    try:
        return args.func(args)
    except _USAGE_ERRORS as exc:
        _report_error(exc, argv, as_json=getattr(args, "json", False))
        return 1
    except (RankcfError, OSError, KeyError, json.JSONDecodeError) as exc:
        _report_error(exc, argv, as_json=getattr(args, "json", False))
        return 2


def _report_error(exc, argv, as_json: bool = False, usage: bool = False) -> None:
    if as_json or (usage and argv and "--json" in argv):
        print(
            json.dumps({"error": type(exc).__name__, "message": str(exc)}),
            file=sys.stderr,
        )
    else:
        print(f"error: {exc}", file=sys.stderr)


def entrypoint() -> None:
    sys.exit(main(sys.argv[1:]))


if __name__ == "__main__":
    entrypoint()
