"""Data containers, validation, and CSV ingestion.

One ingestion format: comma-separated UTF-8 with a header row and '.' decimal
marks. Treatment mode (binary vs continuous) is always declared by the
caller, never inferred from the data.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .errors import AlignmentError, ParseError, SchemaError, ValidationError

BINARY = "binary"
CONTINUOUS = "continuous"

TRAIN, VAL, TEST = "train", "val", "test"
_SPLITS = (TRAIN, VAL, TEST)


def _require_finite(name: str, arr: np.ndarray) -> None:
    if not np.all(np.isfinite(arr)):
        raise ValidationError(f"{name} contains non-finite values")


@dataclass(frozen=True)
class ObservationalDataset:
    """Immutable sample of (treatment, covariates, outcome) rows with split labels."""

    treatments: np.ndarray
    covariates: np.ndarray
    outcomes: np.ndarray
    split: np.ndarray
    treatment_mode: str = BINARY

    def __post_init__(self):
        t = np.array(self.treatments, dtype=float).ravel()
        z = np.atleast_2d(np.array(self.covariates, dtype=float))
        y = np.array(self.outcomes, dtype=float).ravel()
        s = np.array(self.split, dtype=object).ravel()
        object.__setattr__(self, "treatments", t)
        object.__setattr__(self, "covariates", z)
        object.__setattr__(self, "outcomes", y)
        object.__setattr__(self, "split", s)
        n = len(t)
        if n < 1:
            raise ValidationError("dataset must contain at least one row")
        if z.shape[0] != n or len(y) != n or len(s) != n:
            raise ValidationError(
                f"misaligned columns: {n} treatments, {z.shape[0]} covariate rows, "
                f"{len(y)} outcomes, {len(s)} split labels"
            )
        if z.shape[1] < 1:
            raise ValidationError("covariate dimension must be at least 1")
        _require_finite("treatments", t)
        _require_finite("covariates", z)
        _require_finite("outcomes", y)
        bad = [lbl for lbl in np.unique(s) if lbl not in _SPLITS]
        if bad:
            raise ValidationError(f"unknown split labels {bad!r}; expected {_SPLITS}")
        if self.treatment_mode not in (BINARY, CONTINUOUS):
            raise ValidationError(f"unknown treatment mode {self.treatment_mode!r}")
        if self.treatment_mode == BINARY:
            if not np.all((t == 0.0) | (t == 1.0)):
                offender = t[~((t == 0.0) | (t == 1.0))][0]
                raise ValidationError(f"binary mode but treatment value {offender!r} found")
            train_t = t[s == TRAIN]
            if not (np.any(train_t == 0.0) and np.any(train_t == 1.0)):
                raise ValidationError("train split must contain both treatment arms")
        t.setflags(write=False)
        z.setflags(write=False)
        y.setflags(write=False)
        s.setflags(write=False)

    @property
    def n(self) -> int:
        return len(self.treatments)

    @property
    def m(self) -> int:
        return self.covariates.shape[1]

    def split_mask(self, label: str) -> np.ndarray:
        if label not in _SPLITS:
            raise ValidationError(f"unknown split label {label!r}")
        return self.split == label

    def subset(self, mask: np.ndarray) -> "ObservationalDataset":
        return ObservationalDataset(
            treatments=self.treatments[mask].copy(),
            covariates=self.covariates[mask].copy(),
            outcomes=self.outcomes[mask].copy(),
            split=self.split[mask].copy(),
            treatment_mode=self.treatment_mode,
        )


@dataclass(frozen=True)
class Evidence:
    """One unit's factual triple plus the treatment of the counterfactual query."""

    x: float
    z: np.ndarray
    y: float
    x_prime: float

    def __post_init__(self):
        z = np.asarray(self.z, dtype=float).ravel()
        object.__setattr__(self, "z", z)
        vals = np.concatenate([[self.x, self.y, self.x_prime], z])
        if not np.all(np.isfinite(vals)):
            raise ValidationError("evidence contains non-finite values")


@dataclass(frozen=True)
class PotentialOutcomeTable:
    """Simulation-only ground truth: both potential outcomes per row."""

    y0: np.ndarray
    y1: np.ndarray

    def __post_init__(self):
        y0 = np.asarray(self.y0, dtype=float).ravel()
        y1 = np.asarray(self.y1, dtype=float).ravel()
        object.__setattr__(self, "y0", y0)
        object.__setattr__(self, "y1", y1)
        if len(y0) != len(y1):
            raise AlignmentError(f"y0 has {len(y0)} rows, y1 has {len(y1)}")
        _require_finite("y0", y0)
        _require_finite("y1", y1)

    def ite(self) -> np.ndarray:
        return self.y1 - self.y0


@dataclass(frozen=True)
class CsvSchema:
    """Column-name mapping for load_csv.

    covariates=None means: every column that is not treatment/outcome/split.
    split=None means: use a column literally named "split" when one exists.
    """

    treatment: str = "x"
    outcome: str = "y"
    covariates: tuple[str, ...] | None = None
    split: str | None = None

    @staticmethod
    def from_dict(d: dict) -> "CsvSchema":
        cov = d.get("covariates")
        return CsvSchema(
            treatment=d.get("treatment", "x"),
            outcome=d.get("outcome", "y"),
            covariates=tuple(cov) if cov else None,
            split=d.get("split"),
        )


def _parse_cell(raw: str, column: str, row_index: int) -> float:
    try:
        return float(raw)
    except (TypeError, ValueError):
        raise ParseError(
            f"row {row_index}: cannot parse {raw!r} in column {column!r} as a number"
        ) from None


def load_csv(
    path,
    schema: CsvSchema | dict | None = None,
    treatment_mode: str = BINARY,
) -> ObservationalDataset:
    """Read an observational sample from a CSV file.

    Rows without a split column (or with an empty split cell) land in train.
    Row indices in error messages are 0-based data rows (header excluded).
    """
    if schema is None:
        schema = CsvSchema()
    elif isinstance(schema, dict):
        schema = CsvSchema.from_dict(schema)

    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise SchemaError(f"{path}: empty file, expected a header row") from None
        rows = list(reader)

    header = [c.strip() for c in header]
    index = {name: i for i, name in enumerate(header)}
    for required in (schema.treatment, schema.outcome):
        if required not in index:
            raise SchemaError(f"{path}: missing column {required!r} (header: {header})")
    split_col = schema.split
    if split_col is None and "split" in index:
        split_col = "split"
    if split_col is not None and split_col not in index:
        raise SchemaError(f"{path}: missing split column {split_col!r}")

    if schema.covariates is None:
        reserved = {schema.treatment, schema.outcome, split_col}
        cov_names = [c for c in header if c not in reserved]
    else:
        cov_names = list(schema.covariates)
        for c in cov_names:
            if c not in index:
                raise SchemaError(f"{path}: missing covariate column {c!r}")
    if not cov_names:
        raise SchemaError(f"{path}: no covariate columns identified")

    n = len(rows)
    if n == 0:
        raise ValidationError(f"{path}: no data rows")
    t = np.empty(n)
    y = np.empty(n)
    z = np.empty((n, len(cov_names)))
    s = np.empty(n, dtype=object)
    ti, yi = index[schema.treatment], index[schema.outcome]
    zi = [index[c] for c in cov_names]
    si = index[split_col] if split_col is not None else None
    for r, row in enumerate(rows):
        if len(row) != len(header):
            raise ParseError(f"row {r}: expected {len(header)} cells, found {len(row)}")
        t[r] = _parse_cell(row[ti], schema.treatment, r)
        y[r] = _parse_cell(row[yi], schema.outcome, r)
        for j, ci in enumerate(zi):
            z[r, j] = _parse_cell(row[ci], cov_names[j], r)
        label = row[si].strip() if si is not None else ""
        s[r] = label if label else TRAIN

    return ObservationalDataset(t, z, y, s, treatment_mode=treatment_mode)


def write_csv(path, dataset: ObservationalDataset, covariate_names=None) -> None:
    """Write a dataset back out; numbers use shortest round-trip formatting."""
    names = covariate_names or [f"z{j+1}" for j in range(dataset.m)]
    if len(names) != dataset.m:
        raise ValidationError(f"expected {dataset.m} covariate names, got {len(names)}")
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["x", *names, "y", "split"])
        for k in range(dataset.n):
            writer.writerow(
                [repr(float(dataset.treatments[k]))]
                + [repr(float(v)) for v in dataset.covariates[k]]
                + [repr(float(dataset.outcomes[k])), dataset.split[k]]
            )


def consistency_check(
    dataset: ObservationalDataset, table: PotentialOutcomeTable, atol: float = 1e-12
) -> bool:
    """True iff each observed outcome equals its selected potential outcome."""
    if len(table.y0) != dataset.n:
        raise AlignmentError(
            f"table has {len(table.y0)} rows, dataset has {dataset.n}"
        )
    selected = np.where(dataset.treatments == 1.0, table.y1, table.y0)
    return bool(np.all(np.abs(selected - dataset.outcomes) <= atol))


def standardize_covariates(
    dataset: ObservationalDataset,
) -> tuple[ObservationalDataset, np.ndarray, np.ndarray]:
    """Rescale covariates to zero mean / unit sd using train-split statistics.

    Returns the transformed dataset plus the (mean, sd) used, so queries can
    be mapped into the same coordinates. Constant coordinates keep sd 1.
    """
    train = dataset.covariates[dataset.split_mask(TRAIN)]
    mu = train.mean(axis=0)
    sd = train.std(axis=0)
    sd = np.where(sd > 0, sd, 1.0)
    return (
        ObservationalDataset(
            treatments=dataset.treatments.copy(),
            covariates=(dataset.covariates - mu) / sd,
            outcomes=dataset.outcomes.copy(),
            split=dataset.split.copy(),
            treatment_mode=dataset.treatment_mode,
        ),
        mu,
        sd,
    )
