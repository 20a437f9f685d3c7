"""Quantile-regression baselines for counterfactual estimation.

Two strategies over a fixed grid of quantile levels:

  * bilevel: one linear quantile model per level with the treatment as a
    feature; pick the level whose fit passes closest to the observed outcome,
    read the same model off at the counterfactual treatment.
  * fourstep: per-arm quantile models weighted by inverse propensity; match
    the level on the factual arm's models, read the answer off the target
    arm's separately fitted models.

Models are linear on purpose: a deterministic fit isolates the method
comparison from representation learning. Training is averaged subgradient
descent with a 1/sqrt(iter) step, fixed iteration count, no randomness.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .dataset import BINARY, TRAIN, Evidence, ObservationalDataset
from .errors import ValidationError

DEFAULT_ITERATIONS = 20_000


@dataclass(frozen=True)
class TauGrid:
    """Strictly increasing quantile levels inside (0, 1)."""

    levels: tuple[float, ...] = tuple(round(0.05 * k, 2) for k in range(1, 20))

    def __post_init__(self):
        lv = tuple(float(v) for v in self.levels)
        object.__setattr__(self, "levels", lv)
        if not lv:
            raise ValidationError("tau grid must not be empty")
        if any(not (0.0 < v < 1.0) for v in lv):
            raise ValidationError("tau levels must lie strictly inside (0, 1)")
        if any(b <= a for a, b in zip(lv, lv[1:])):
            raise ValidationError("tau levels must be strictly increasing")

    @staticmethod
    def with_step(step: float) -> "TauGrid":
        if not (0.0 < step < 0.5):
            raise ValidationError("tau grid step must lie in (0, 0.5)")
        count = int(math.floor((1.0 - 1e-9) / step))
        return TauGrid(tuple(round(step * k, 10) for k in range(1, count + 1)))


@dataclass(frozen=True)
class QuantileModel:
    """Linear conditional-quantile model at one level."""

    weights: np.ndarray
    intercept: float
    tau: float

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=float).ravel()
        object.__setattr__(self, "weights", w)
        if not (0.0 < self.tau < 1.0):
            raise ValidationError("tau must lie in (0, 1)")
        if not (np.all(np.isfinite(w)) and math.isfinite(self.intercept)):
            raise ValidationError("quantile model parameters must be finite")

    def predict(self, features) -> np.ndarray | float:
        features = np.asarray(features, dtype=float)
        single = features.ndim == 1
        out = np.atleast_2d(features) @ self.weights + self.intercept
        return float(out[0]) if single else out


def check_loss(xi, tau: float) -> np.ndarray | float:
    """Pinball value tau*xi for xi >= 0, (tau-1)*xi for xi < 0."""
    if not (0.0 < tau < 1.0):
        raise ValidationError("tau must lie in (0, 1)")
    xi = np.asarray(xi, dtype=float)
    out = np.where(xi >= 0, tau * xi, (tau - 1.0) * xi)
    return float(out) if out.ndim == 0 else out


def _weighted_quantile(values: np.ndarray, weights: np.ndarray, tau: float) -> float:
    """Smallest value whose cumulative weight share reaches tau."""
    order = np.argsort(values, kind="stable")
    cum = np.cumsum(weights[order])
    j = int(np.searchsorted(cum, tau * cum[-1], side="left"))
    return float(values[order][min(j, len(values) - 1)])


def fit_quantile_grid(
    features: np.ndarray,
    targets: np.ndarray,
    sample_weights: np.ndarray,
    grid: TauGrid,
    iterations: int = DEFAULT_ITERATIONS,
) -> list[QuantileModel]:
    """Fit one linear model per grid level, all levels in lockstep.

    Averaged subgradient descent: step c/sqrt(iter) with c set from the
    response and feature scale, iterates averaged over the last half.
    Intercepts start at the weighted sample quantile of the targets, which
    is already optimal for degenerate (constant) data.
    """
    features = np.atleast_2d(np.asarray(features, dtype=float))
    targets = np.asarray(targets, dtype=float).ravel()
    w = np.asarray(sample_weights, dtype=float).ravel()
    n, m = features.shape
    if len(targets) != n or len(w) != n:
        raise ValidationError("features, targets and weights must be aligned")
    if np.any(w < 0):
        raise ValidationError("sample weights must be nonnegative")
    wsum = float(np.sum(w))
    if wsum <= 0:
        raise ValidationError("sample weights sum to zero")
    wn = w / wsum

    levels = np.asarray(grid.levels)
    n_levels = len(levels)
    theta = np.zeros((m + 1, n_levels))
    for li, tau in enumerate(levels):
        theta[0, li] = _weighted_quantile(targets, wn, float(tau))

    xmat = np.concatenate([np.ones((n, 1)), features], axis=1)
    col_scale = math.sqrt(float(np.sum(wn * np.sum(xmat * xmat, axis=1))))
    y_scale = float(np.sqrt(np.sum(wn * (targets - np.sum(wn * targets)) ** 2)))
    c = max(y_scale, 1e-8) / max(col_scale, 1e-8)

    accum = np.zeros_like(theta)
    half = iterations // 2
    # descent direction is xw.T @ psi with the weights folded into the design
    xw_t = np.ascontiguousarray((xmat * wn[:, None]).T)
    targets_col = targets[:, None]
    fitted = np.empty((n, n_levels))
    exceed = np.empty((n, n_levels), dtype=bool)
    psi = np.empty((n, n_levels))
    step_dir = np.empty_like(theta)
    for it in range(1, iterations + 1):
        np.matmul(xmat, theta, out=fitted)
        np.greater(fitted, targets_col, out=exceed)
        np.subtract(levels[None, :], exceed, out=psi)
        np.matmul(xw_t, psi, out=step_dir)
        step_dir *= c / math.sqrt(it)
        theta += step_dir
        if it > half:
            accum += theta
    theta = accum / (iterations - half)
    return [
        QuantileModel(weights=theta[1:, li].copy(), intercept=float(theta[0, li]), tau=float(tau))
        for li, tau in enumerate(levels)
    ]


def fit_quantile(
    features: np.ndarray,
    targets: np.ndarray,
    sample_weights: np.ndarray,
    tau: float,
    iterations: int = DEFAULT_ITERATIONS,
) -> QuantileModel:
    """Single-level convenience wrapper around fit_quantile_grid."""
    return fit_quantile_grid(
        features, targets, sample_weights, TauGrid((float(tau),)), iterations=iterations
    )[0]


def _train_arrays(dataset: ObservationalDataset):
    mask = dataset.split_mask(TRAIN)
    return dataset.treatments[mask], dataset.covariates[mask], dataset.outcomes[mask]


class BilevelModel:
    """Grid of single-model quantile fits with treatment as a feature."""

    def __init__(self, dataset: ObservationalDataset, grid: TauGrid,
                 iterations: int = DEFAULT_ITERATIONS):
        if dataset.treatment_mode != BINARY:
            raise ValidationError("bilevel baseline requires binary treatment mode")
        t, z, y = _train_arrays(dataset)
        feats = np.concatenate([t[:, None], z], axis=1)
        self.grid = grid
        self.models = fit_quantile_grid(feats, y, np.ones(len(y)), grid, iterations=iterations)

    def estimate(self, x, z, y, x_prime) -> np.ndarray:
        """Counterfactual estimates for aligned query arrays."""
        x = np.asarray(x, dtype=float).ravel()
        y = np.asarray(y, dtype=float).ravel()
        x_prime = np.asarray(x_prime, dtype=float).ravel()
        z = np.atleast_2d(np.asarray(z, dtype=float))
        factual = np.concatenate([x[:, None], z], axis=1)
        counter = np.concatenate([x_prime[:, None], z], axis=1)
        fit_at_y = np.stack([m.predict(factual) for m in self.models], axis=1)
        best = np.argmin(np.abs(fit_at_y - y[:, None]), axis=1)
        fit_cf = np.stack([m.predict(counter) for m in self.models], axis=1)
        return fit_cf[np.arange(len(x)), best]


class FourStepModel:
    """Per-arm IPW-weighted quantile fits; level matched on the factual arm."""

    def __init__(self, dataset: ObservationalDataset, grid: TauGrid, propensity,
                 iterations: int = DEFAULT_ITERATIONS):
        if dataset.treatment_mode != BINARY:
            raise ValidationError("fourstep baseline requires binary treatment mode")
        t, z, y = _train_arrays(dataset)
        self.grid = grid
        self.models = {}
        for arm in (0, 1):
            weights = np.where(t == arm, 1.0, 0.0) / np.asarray(
                propensity(z, arm), dtype=float
            )
            self.models[arm] = fit_quantile_grid(z, y, weights, grid, iterations=iterations)

    def estimate(self, x, z, y, x_prime) -> np.ndarray:
        x = np.asarray(x, dtype=float).ravel()
        y = np.asarray(y, dtype=float).ravel()
        x_prime = np.asarray(x_prime, dtype=float).ravel()
        z = np.atleast_2d(np.asarray(z, dtype=float))
        out = np.empty(len(x))
        for fx in (0, 1):
            for tx in (0, 1):
                rows = np.flatnonzero((x == fx) & (x_prime == tx))
                if not len(rows):
                    continue
                fit_at_y = np.stack(
                    [m.predict(z[rows]) for m in self.models[fx]], axis=1
                )
                best = np.argmin(np.abs(fit_at_y - y[rows][:, None]), axis=1)
                fit_cf = np.stack([m.predict(z[rows]) for m in self.models[tx]], axis=1)
                out[rows] = fit_cf[np.arange(len(rows)), best]
        return out


def bilevel_estimate(
    dataset: ObservationalDataset,
    evidence: Evidence,
    grid: TauGrid | None = None,
    iterations: int = DEFAULT_ITERATIONS,
) -> float:
    """Single-query bilevel estimate (fits the grid afresh)."""
    model = BilevelModel(dataset, grid or TauGrid(), iterations=iterations)
    return float(
        model.estimate([evidence.x], evidence.z[None, :], [evidence.y], [evidence.x_prime])[0]
    )


def fourstep_estimate(
    dataset: ObservationalDataset,
    evidence: Evidence,
    grid: TauGrid | None = None,
    propensity=None,
    iterations: int = DEFAULT_ITERATIONS,
) -> float:
    """Single-query four-step estimate (fits the per-arm grids afresh)."""
    if propensity is None:
        raise ValidationError("fourstep needs a fitted propensity function")
    model = FourStepModel(dataset, grid or TauGrid(), propensity, iterations=iterations)
    return float(
        model.estimate([evidence.x], evidence.z[None, :], [evidence.y], [evidence.x_prime])[0]
    )
