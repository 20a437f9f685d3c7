"""Treatment-assignment probability models.

A fitted model maps covariates to P(X = arm | Z = z). Estimation is a plain
L2-penalized logistic regression trained by full-batch gradient ascent with
backtracking line search, so fits are deterministic and reproducible without
any seed. Predictions are clipped away from 0 and 1 because they end up in
inverse-probability denominators.

Oracle and deliberately mis-scaled propensities can be injected for bias
experiments; scaling an arm's probability by c yields a relative error
delta = (p - c*p)/(c*p) = (1 - c)/c wherever no clipping occurs.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np

from .dataset import TRAIN, ObservationalDataset
from .errors import ConfigurationWarning, SeparationWarning, ValidationError

_NORM_CAP = 1e3


def sigmoid(v):
    """Numerically stable logistic function."""
    v = np.asarray(v, dtype=float)
    out = np.empty_like(v)
    pos = v >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-v[pos]))
    ev = np.exp(v[~pos])
    out[~pos] = ev / (1.0 + ev)
    return float(out) if out.ndim == 0 else out


@dataclass(frozen=True)
class PropensityModel:
    """Logistic model for arm 1; arm 0 is the complement."""

    weights: np.ndarray
    intercept: float
    l2: float = 1e-4
    clip: float = 0.01

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=float).ravel()
        object.__setattr__(self, "weights", w)
        if not np.all(np.isfinite(w)) or not math.isfinite(self.intercept):
            raise ValidationError("propensity parameters must be finite")
        if not (0.0 < self.clip < 0.5):
            raise ValidationError("clip must lie in (0, 0.5)")
        if self.l2 < 0:
            raise ValidationError("l2 must be nonnegative")

    def predict(self, z, arm: int) -> np.ndarray | float:
        return predict(self, z, arm)

    def as_function(self):
        """Adapter matching the (z_rows, arm) -> probabilities interface."""
        return lambda z, arm: predict(self, z, arm)


def predict(model: PropensityModel, z, arm: int) -> np.ndarray | float:
    """P(X = arm | Z = z), clipped to [clip, 1 - clip].

    Accepts a single covariate vector or a matrix of rows.
    """
    if arm not in (0, 1):
        raise ValidationError(f"arm must be 0 or 1, got {arm!r}")
    z = np.asarray(z, dtype=float)
    single = z.ndim == 1
    zm = np.atleast_2d(z)
    if zm.shape[1] != len(model.weights):
        raise ValidationError(
            f"query has {zm.shape[1]} coordinates, model expects {len(model.weights)}"
        )
    p1 = sigmoid(zm @ model.weights + model.intercept)
    p = p1 if arm == 1 else 1.0 - p1
    p = np.clip(p, model.clip, 1.0 - model.clip)
    return float(p[0]) if single else p


def _penalized_loglik(features, targets, w, b, l2):
    s = features @ w + b
    # log-likelihood via the softplus identity: t*s - log(1 + exp(s))
    ll = np.mean(targets * s - np.logaddexp(0.0, s))
    return ll - 0.5 * l2 * float(w @ w)


def _gradient(features, targets, w, b, l2):
    resid = targets - sigmoid(features @ w + b)
    gw = features.T @ resid / len(targets) - l2 * w
    gb = float(np.mean(resid))
    return gw, gb


def fit_logistic(
    dataset: ObservationalDataset,
    l2: float = 1e-4,
    max_iter: int = 5000,
    tol: float = 1e-8,
    clip: float = 0.01,
    debug: bool = False,
) -> PropensityModel:
    """Fit P(X=1|Z) on the train split by penalized maximum likelihood.

    Gradient ascent with backtracking line search; the penalty applies to the
    weights only, so an intercept-only fit reproduces logit of the treated
    fraction. Stops when the gradient max-norm drops below tol. If the
    parameter norm grows past the cap (possible only with l2=0 and separable
    data) the fit stops early with a SeparationWarning.
    """
    if dataset.treatment_mode != "binary":
        raise ValidationError("propensity fitting requires binary treatment mode")
    mask = dataset.split_mask(TRAIN)
    features = dataset.covariates[mask]
    targets = dataset.treatments[mask]

    w = np.zeros(features.shape[1])
    b = 0.0
    ll = _penalized_loglik(features, targets, w, b, l2)
    step = 1.0
    for _ in range(max_iter):
        gw, gb = _gradient(features, targets, w, b, l2)
        gnorm = max(np.max(np.abs(gw)), abs(gb))
        if gnorm < tol:
            break
        step = min(step * 2.0, 1e6)
        while True:
            w_new = w + step * gw
            b_new = b + step * gb
            ll_new = _penalized_loglik(features, targets, w_new, b_new, l2)
            if ll_new >= ll + 1e-4 * step * (gw @ gw + gb * gb):
                break
            step *= 0.5
            if step < 1e-14:
                w_new, b_new, ll_new = w, b, ll
                break
        if debug and ll_new < ll:
            raise AssertionError("line search decreased the objective")
        w, b, ll = w_new, b_new, ll_new
        if np.linalg.norm(w) > _NORM_CAP:
            warnings.warn(
                "parameter norm exceeded cap; data looks separable, returning "
                "the capped model",
                SeparationWarning,
                stacklevel=2,
            )
            break
    return PropensityModel(weights=w, intercept=b, l2=l2, clip=clip)


@dataclass(frozen=True)
class PropensityOverride:
    """Replace a true propensity with a deliberately rescaled version.

    mode "oracle" passes the truth through; mode "scaled" multiplies arm 0 /
    arm 1 probabilities by scale_factors (no renormalization), realizing a
    known relative error per arm.
    """

    mode: str = "oracle"
    scale_factors: tuple[float, float] = (1.0, 1.0)

    def __post_init__(self):
        if self.mode not in ("oracle", "scaled"):
            raise ValidationError(f"unknown override mode {self.mode!r}")
        if any(c <= 0 for c in self.scale_factors):
            raise ValidationError("scale factors must be positive")


def override_propensity(true_propensity, override: PropensityOverride, probe_z=None, clip_eps: float = 1e-12):
    """Wrap a true propensity function with the configured override.

    true_propensity has signature (z_rows, arm) -> probabilities. Scaled
    probabilities are clipped into (0, 1); if probe points are supplied and
    more than 5% of them would be clipped, a ConfigurationWarning fires.
    """
    if override.mode == "oracle":
        return true_propensity
    c0, c1 = override.scale_factors

    def scaled(z, arm):
        c = c1 if arm == 1 else c0
        raw = c * np.asarray(true_propensity(z, arm), dtype=float)
        return np.clip(raw, clip_eps, 1.0 - clip_eps)

    if probe_z is not None:
        probe_z = np.atleast_2d(np.asarray(probe_z, dtype=float))
        clipped = 0
        for arm, c in ((0, c0), (1, c1)):
            raw = c * np.asarray(true_propensity(probe_z, arm), dtype=float)
            clipped += int(np.sum((raw <= clip_eps) | (raw >= 1.0 - clip_eps)))
        if clipped > 0.05 * 2 * probe_z.shape[0]:
            warnings.warn(
                f"override clips {clipped} of {2 * probe_z.shape[0]} probe "
                "probabilities; realized errors will deviate from (1-c)/c",
                ConfigurationWarning,
                stacklevel=2,
            )
    return scaled
