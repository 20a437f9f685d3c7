"""Experiment orchestration: replication loops, method comparison, sweeps.

A plan names a data source (simulation config or CSV paths), the methods to
compare, the seeds to replicate over, and the hyperparameter grids. Each
(seed, method) cell runs independently; a cell that fails is recorded with
an error flag and the run continues, since long sweeps over sparse kernels
are expected to hit coverage failures.

Hyperparameters are selected strictly on the validation split; test rows
never touch any fitted object. Results are emitted long-format with
deterministic ordering and shortest-round-trip number formatting so repeated
runs are byte-identical.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field

import numpy as np

from .baselines import BilevelModel, FourStepModel, TauGrid
from .dataset import (
    TEST,
    TRAIN,
    VAL,
    CsvSchema,
    ObservationalDataset,
    PotentialOutcomeTable,
    load_csv,
    standardize_covariates,
)
from .errors import ValidationError
from .estimator import estimate_units, select_bandwidth
from .kernels import GAUSSIAN, KernelSpec
from .metrics import ItePredictions, ate_error, pehe
from .propensity import PropensityOverride, fit_logistic, override_propensity
from .simulator import SimConfig, simulate

METHODS = ("ours", "ours-weighted", "bilevel", "fourstep")
DEFAULT_BANDWIDTH_GRID = (1.0, 3.0, 5.0, 7.0, 9.0)

_COLUMNS = ("axis", "axis_value", "seed", "method", "split", "metric", "value", "flag")


@dataclass(frozen=True)
class PropensityPlan:
    """How each replication obtains its propensity function."""

    mode: str = "logistic"  # logistic | oracle | scaled
    l2: float = 1e-4
    clip: float = 0.01
    scale_factors: tuple[float, float] = (1.0, 1.0)

    def __post_init__(self):
        if self.mode not in ("logistic", "oracle", "scaled"):
            raise ValidationError(f"unknown propensity mode {self.mode!r}")

    @staticmethod
    def from_dict(d: dict) -> "PropensityPlan":
        return PropensityPlan(
            mode=d.get("mode", "logistic"),
            l2=float(d.get("l2", 1e-4)),
            clip=float(d.get("clip", 0.01)),
            scale_factors=tuple(d.get("scale_factors", (1.0, 1.0))),
        )

    def to_dict(self) -> dict:
        return {
            "mode": self.mode,
            "l2": self.l2,
            "clip": self.clip,
            "scale_factors": list(self.scale_factors),
        }


@dataclass(frozen=True)
class ExperimentPlan:
    """Everything run_experiment needs, JSON-serializable."""

    source: str = "sim"  # sim | csv
    sim: SimConfig = field(default_factory=SimConfig)
    csv_path: str | None = None
    csv_schema: dict | None = None
    truth_path: str | None = None
    methods: tuple[str, ...] = ("ours",)
    seeds: tuple[int, ...] = (0,)
    kernel: str = GAUSSIAN
    bandwidth_grid: tuple[float, ...] = DEFAULT_BANDWIDTH_GRID
    fixed_bandwidth: float | None = None
    tau_step: float = 0.05
    quantile_iterations: int = 20_000
    propensity: PropensityPlan = field(default_factory=PropensityPlan)
    standardize: bool = False
    max_val_queries: int = 2000
    max_eval_queries: int | None = None
    predict_both_arms: bool = False

    def __post_init__(self):
        if self.source not in ("sim", "csv"):
            raise ValidationError(f"unknown source {self.source!r}")
        if self.source == "csv" and not self.csv_path:
            raise ValidationError("csv source needs csv_path")
        if len(self.seeds) == 0:
            raise ValidationError("plan needs at least one seed")
        bad = [mth for mth in self.methods if mth not in METHODS]
        if bad:
            raise ValidationError(f"unknown methods {bad!r}; choose from {METHODS}")
        if not self.methods:
            raise ValidationError("plan needs at least one method")

    @staticmethod
    def from_dict(d: dict) -> "ExperimentPlan":
        grids = d.get("grids", {})
        return ExperimentPlan(
            source=d.get("source", "sim"),
            sim=SimConfig(**d.get("sim_config", {})),
            csv_path=d.get("csv_path"),
            csv_schema=d.get("csv_schema"),
            truth_path=d.get("truth_path"),
            methods=tuple(d.get("methods", ("ours",))),
            seeds=tuple(int(s) for s in d.get("seeds", (0,))),
            kernel=d.get("kernel", GAUSSIAN),
            bandwidth_grid=tuple(float(h) for h in grids.get("bandwidth", DEFAULT_BANDWIDTH_GRID)),
            fixed_bandwidth=(
                float(d["fixed_bandwidth"]) if d.get("fixed_bandwidth") is not None else None
            ),
            tau_step=float(d.get("tau_step", 0.05)),
            quantile_iterations=int(d.get("quantile_iterations", 20_000)),
            propensity=PropensityPlan.from_dict(d.get("propensity", {})),
            standardize=bool(d.get("standardize", False)),
            max_val_queries=int(d.get("max_val_queries", 2000)),
            max_eval_queries=(
                int(d["max_eval_queries"]) if d.get("max_eval_queries") is not None else None
            ),
            predict_both_arms=bool(d.get("predict_both_arms", False)),
        )

    def to_dict(self) -> dict:
        return {
            "source": self.source,
            "sim_config": self.sim.to_dict(),
            "csv_path": self.csv_path,
            "csv_schema": self.csv_schema,
            "truth_path": self.truth_path,
            "methods": list(self.methods),
            "seeds": list(self.seeds),
            "kernel": self.kernel,
            "grids": {"bandwidth": list(self.bandwidth_grid)},
            "fixed_bandwidth": self.fixed_bandwidth,
            "tau_step": self.tau_step,
            "quantile_iterations": self.quantile_iterations,
            "propensity": self.propensity.to_dict(),
            "standardize": self.standardize,
            "max_val_queries": self.max_val_queries,
            "max_eval_queries": self.max_eval_queries,
            "predict_both_arms": self.predict_both_arms,
        }


def load_plan(path) -> ExperimentPlan:
    with open(path, encoding="utf-8") as fh:
        return ExperimentPlan.from_dict(json.load(fh))


@dataclass
class _Replication:
    dataset: ObservationalDataset
    table: PotentialOutcomeTable | None
    propensity_fn: object
    seed: int


def _load_truth_csv(path, n_expected: int) -> PotentialOutcomeTable:
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        y0, y1 = [], []
        for row in reader:
            y0.append(float(row["y0"]))
            y1.append(float(row["y1"]))
    table = PotentialOutcomeTable(y0=np.asarray(y0), y1=np.asarray(y1))
    if len(table.y0) != n_expected:
        raise ValidationError(
            f"ground-truth file has {len(table.y0)} rows, dataset has {n_expected}"
        )
    return table


def _prepare(plan: ExperimentPlan, seed: int) -> _Replication:
    if plan.source == "sim":
        config = SimConfig(**{**plan.sim.to_dict(), "seed": seed})
        dataset, table, truth = simulate(config)
    else:
        dataset = load_csv(
            plan.csv_path,
            CsvSchema.from_dict(plan.csv_schema) if plan.csv_schema else None,
        )
        table = _load_truth_csv(plan.truth_path, dataset.n) if plan.truth_path else None
        truth = None

    if plan.standardize:
        dataset, _, _ = standardize_covariates(dataset)

    pp = plan.propensity
    if pp.mode == "logistic":
        model = fit_logistic(dataset, l2=pp.l2, clip=pp.clip)
        prop = model.as_function()
    else:
        if truth is None:
            raise ValidationError(f"propensity mode {pp.mode!r} needs simulated ground truth")
        prop = truth.propensity
        if pp.mode == "scaled":
            prop = override_propensity(
                prop, PropensityOverride(mode="scaled", scale_factors=pp.scale_factors)
            )
    return _Replication(dataset=dataset, table=table, propensity_fn=prop, seed=seed)


def _subsample(idx: np.ndarray, cap: int | None) -> np.ndarray:
    if cap is None or len(idx) <= cap:
        return idx
    keep = np.unique(np.linspace(0, len(idx) - 1, cap).astype(int))
    return idx[keep]


def _eval_rows(rep: _Replication, split: str, cap: int | None) -> np.ndarray:
    idx = np.flatnonzero(rep.dataset.split_mask(split))
    return _subsample(idx, cap)


def _counterfactual_estimates(
    rep: _Replication,
    plan: ExperimentPlan,
    method: str,
    bandwidth: float,
    rows: np.ndarray,
    pool: ObservationalDataset,
    baseline_model,
    target_factual: bool = False,
) -> tuple[np.ndarray, np.ndarray]:
    """(estimate, covered) for each row's query arm.

    target_factual flips the target arm to the unit's own arm, turning the
    estimate into a factual reconstruction (the only direction checkable
    without ground truth).
    """
    ds = rep.dataset
    x = ds.treatments[rows]
    z = ds.covariates[rows]
    y = ds.outcomes[rows]
    x_prime = x if target_factual else 1.0 - x
    if method in ("ours", "ours-weighted"):
        kernel = KernelSpec(family=plan.kernel, bandwidth=bandwidth)
        est, _, covered, _ = estimate_units(
            pool,
            x,
            z,
            y,
            x_prime,
            kernel,
            rep.propensity_fn,
            allow_same_arm=target_factual,
            kernel_ratio_weight=(method == "ours-weighted"),
        )
        return est, covered
    est = baseline_model.estimate(x, z, y, x_prime)
    return est, np.ones(len(rows), dtype=bool)


def _metric_rows(
    rep: _Replication,
    plan: ExperimentPlan,
    method: str,
    split: str,
    rows: np.ndarray,
    estimates: np.ndarray,
    covered: np.ndarray,
    recon: np.ndarray | None = None,
) -> list[dict]:
    ds = rep.dataset
    out: list[dict] = []

    def add(metric: str, value, flag: str = "") -> None:
        out.append(
            {
                "seed": rep.seed,
                "method": method,
                "split": split,
                "metric": metric,
                "value": value,
                "flag": flag,
            }
        )

    n_rows = len(rows)
    n_cov = int(np.sum(covered))
    add("n_units", float(n_rows))
    add("n_covered", float(n_cov), "" if n_cov == n_rows else "partial_coverage")
    if n_cov == 0:
        add("sqrt_pehe", math.nan, "error:no_coverage")
        return out

    keep = rows[covered]
    est = estimates[covered]
    x = ds.treatments[keep]
    y = ds.outcomes[keep]
    y1_hat = np.where(x == 1.0, y, est)
    y0_hat = np.where(x == 0.0, y, est)
    pred = ItePredictions(y1_hat=y1_hat, y0_hat=y0_hat)

    if rep.table is not None:
        true_ite = rep.table.ite()[keep]
        add("sqrt_pehe", math.sqrt(pehe(pred, true_ite)))
        add("ate_error", ate_error(pred, true_ite))
        scale = float(np.std(ds.outcomes[ds.split_mask(TRAIN)]))
        if scale > 0:
            add("sqrt_pehe_standardized", math.sqrt(pehe(pred, true_ite)) / scale)
            add("ate_error_standardized", ate_error(pred, true_ite) / scale)
    if recon is not None:
        good = covered & np.isfinite(recon)
        if np.any(good):
            mae = float(np.mean(np.abs(recon[good] - ds.outcomes[rows][good])))
            add("factual_recon_mae", mae, "" if rep.table is not None else "no_ground_truth")
    return out


def run_experiment(plan: ExperimentPlan) -> "ExperimentResult":
    """Run every (seed, method) cell of the plan and aggregate."""
    rows: list[dict] = []
    for seed in plan.seeds:
        try:
            rep = _prepare(plan, seed)
        except Exception as exc:  # noqa: BLE001 - cell-level degradation is the contract
            for method in plan.methods:
                rows.append(_error_row(seed, method, "", exc))
            continue
        pool = rep.dataset.subset(rep.dataset.split_mask(TRAIN))
        for method in plan.methods:
            try:
                rows.extend(_run_cell(rep, plan, method, pool))
            except Exception as exc:  # noqa: BLE001
                rows.append(_error_row(seed, method, "", exc))
    return ExperimentResult(rows=_with_aggregates(rows), plan=plan)


def _run_cell(rep: _Replication, plan: ExperimentPlan, method: str, pool) -> list[dict]:
    out: list[dict] = []
    baseline_model = None
    bandwidth = plan.fixed_bandwidth or 0.0
    if method in ("ours", "ours-weighted"):
        if plan.fixed_bandwidth is None:
            val_rows = _eval_rows(rep, VAL, plan.max_val_queries)
            if len(val_rows) == 0:
                raise ValidationError("bandwidth selection needs a validation split")
            ds = rep.dataset
            bandwidth, _ = select_bandwidth(
                pool,
                ds.treatments[val_rows],
                ds.covariates[val_rows],
                ds.outcomes[val_rows],
                plan.kernel,
                plan.bandwidth_grid,
                rep.propensity_fn,
                max_queries=plan.max_val_queries,
            )
        out.append(
            {
                "seed": rep.seed,
                "method": method,
                "split": "",
                "metric": "selected_bandwidth",
                "value": float(bandwidth),
                "flag": "" if plan.fixed_bandwidth is None else "fixed",
            }
        )
    else:
        grid = TauGrid.with_step(plan.tau_step)
        if method == "bilevel":
            baseline_model = BilevelModel(
                rep.dataset, grid, iterations=plan.quantile_iterations
            )
        else:
            baseline_model = FourStepModel(
                rep.dataset, grid, rep.propensity_fn, iterations=plan.quantile_iterations
            )

    for split, label in ((TRAIN, "in"), (TEST, "out")):
        rows_idx = _eval_rows(rep, split, plan.max_eval_queries)
        if len(rows_idx) == 0:
            continue
        est, covered = _counterfactual_estimates(
            rep, plan, method, bandwidth, rows_idx, pool, baseline_model
        )
        recon = None
        if rep.table is None:
            recon, recon_cov = _counterfactual_estimates(
                rep, plan, method, bandwidth, rows_idx, pool, baseline_model,
                target_factual=True,
            )
            recon = np.where(recon_cov, recon, np.nan)
        out.extend(_metric_rows(rep, plan, method, label, rows_idx, est, covered, recon=recon))
    return out


def _error_row(seed, method, split, exc) -> dict:
    return {
        "seed": seed,
        "method": method,
        "split": split,
        "metric": "error",
        "value": math.nan,
        "flag": f"error:{type(exc).__name__}:{exc}",
    }


def _with_aggregates(rows: list[dict]) -> list[dict]:
    """Append mean/std rows over seeds per (method, split, metric).

    Population std (ddof=0); error cells are excluded from aggregation.
    """
    groups: dict[tuple, list[float]] = {}
    order: list[tuple] = []
    for row in rows:
        if row["flag"].startswith("error:") or not isinstance(row["value"], float):
            continue
        if math.isnan(row["value"]):
            continue
        key = (row["method"], row["split"], row["metric"])
        if key not in groups:
            groups[key] = []
            order.append(key)
        groups[key].append(row["value"])
    out = list(rows)
    for key in order:
        vals = np.asarray(groups[key])
        for stat, value in (("mean", float(np.mean(vals))), ("std", float(np.std(vals)))):
            out.append(
                {
                    "seed": stat,
                    "method": key[0],
                    "split": key[1],
                    "metric": key[2],
                    "value": value,
                    "flag": f"aggregate_of:{len(vals)}",
                }
            )
    return out


@dataclass(frozen=True)
class ExperimentResult:
    rows: list[dict]
    plan: ExperimentPlan
    axis: str = ""

    def value(self, method: str, split: str, metric: str, seed="mean") -> float:
        for row in self.rows:
            if (
                str(row["seed"]) == str(seed)
                and row["method"] == method
                and row["split"] == split
                and row["metric"] == metric
            ):
                return row["value"]
        raise KeyError((seed, method, split, metric))

    def seed_values(self, method: str, split: str, metric: str) -> dict[int, float]:
        out = {}
        for row in self.rows:
            if (
                isinstance(row["seed"], int)
                and row["method"] == method
                and row["split"] == split
                and row["metric"] == metric
            ):
                out[row["seed"]] = row["value"]
        return out

    def table_cells(self) -> dict[tuple, str]:
        """Aggregate cells formatted `mean +- std` per (method, split, metric)."""
        cells = {}
        for row in self.rows:
            if row["seed"] == "mean":
                try:
                    std = self.value(row["method"], row["split"], row["metric"], seed="std")
                except KeyError:
                    continue
                cells[(row["method"], row["split"], row["metric"])] = (
                    f"{row['value']:.2f} +- {std:.2f}"
                )
        return cells

    def to_csv(self, path) -> None:
        write_results_csv(self.rows, path, axis=self.axis)

    def manifest(self) -> dict:
        return {"plan": self.plan.to_dict(), "axis": self.axis, "n_rows": len(self.rows)}


def _fmt(value) -> str:
    if isinstance(value, float):
        if math.isnan(value):
            return "nan"
        return repr(float(value))
    return str(value)


def write_results_csv(rows: list[dict], path, axis: str = "") -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(_COLUMNS)
        for row in rows:
            writer.writerow(
                [
                    row.get("axis", axis),
                    _fmt(row.get("axis_value", "")),
                    _fmt(row["seed"]),
                    row["method"],
                    row["split"],
                    row["metric"],
                    _fmt(row["value"]),
                    row["flag"],
                ]
            )


SWEEP_AXES = ("alpha", "bandwidth", "kernel", "rho", "beta")


def sweep(axis: str, values, base_plan: ExperimentPlan) -> ExperimentResult:
    """Repeat run_experiment for each axis value; long-format rows."""
    if axis not in SWEEP_AXES:
        raise ValidationError(f"unknown sweep axis {axis!r}; choose from {SWEEP_AXES}")
    all_rows: list[dict] = []
    for value in values:
        plan_dict = base_plan.to_dict()
        if axis in ("alpha", "rho", "beta"):
            plan_dict["sim_config"][axis] = float(value)
        elif axis == "bandwidth":
            plan_dict["fixed_bandwidth"] = float(value)
        else:
            plan_dict["kernel"] = str(value)
        result = run_experiment(ExperimentPlan.from_dict(plan_dict))
        for row in result.rows:
            row = dict(row)
            row["axis"] = axis
            row["axis_value"] = value
            all_rows.append(row)
    return ExperimentResult(rows=all_rows, plan=base_plan, axis=axis)
