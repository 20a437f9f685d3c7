"""Synthetic data generation with retained potential-outcome ground truth.

Generating process (binary treatment):

    Z ~ N(0, Sigma_m)            Sigma_m = I, or max(0.01, rho^|i-j|) entries
    W_x ~ Unif(-1, 1)^m          X ~ Bern(sigmoid(W_x . Z))
    U_0 ~ N(0, 1), U_1 = alpha * U_0
    W_y ~ N(0, I_m)              Y_1 = (W_y + W_y1) . Z + U_1
                                 Y_0 = W_y . Z / alpha + U_0
    W_y1 ~ N(0, beta * I_m)      beta > 0 degrades rank preservation

With beta = 0 the construction is comonotone (Y_1 = alpha * Y_0), every
conditional rank is preserved exactly, and the counterfactual map has the
closed form y_1 = alpha * y for control units and y_0 = y / alpha for
treated units.

Randomness: one 64-bit seed feeds a SeedSequence whose spawned children
drive Philox streams, one per variable block, in the fixed order
(z, w_x, x, u_0, w_y, w_y1, split). Per-block streams make each draw
independent of the order blocks are consumed in and keep the weight vectors
identical across different sample sizes at the same seed.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np

from .dataset import TEST, TRAIN, VAL, ObservationalDataset, PotentialOutcomeTable
from .errors import ConfigurationWarning, ValidationError
from .propensity import sigmoid
from .rank import kendall

_STREAMS = ("z", "wx", "x", "u0", "wy", "wy1", "split")


@dataclass(frozen=True)
class SimConfig:
    """Knobs of the generating process."""

    m: int = 5
    n: int = 10_000
    alpha: float = 1.0
    rho: float = 0.0
    beta: float = 0.0
    seed: int = 0
    split_ratios: tuple[float, float, float] = (0.63, 0.27, 0.10)

    def __post_init__(self):
        if self.m < 1:
            raise ValidationError("covariate dimension must be at least 1")
        if self.n < 10:
            raise ValidationError("sample count must be at least 10")
        if not (self.alpha > 0):
            raise ValidationError("heterogeneity degree alpha must be positive")
        if not (0.0 <= self.rho < 1.0):
            raise ValidationError("correlation base rho must lie in [0, 1)")
        if self.beta < 0:
            raise ValidationError("rank-violation strength beta must be nonnegative")
        r = self.split_ratios
        if len(r) != 3 or any(v <= 0 for v in r) or abs(sum(r) - 1.0) > 1e-9:
            raise ValidationError("split ratios must be three positive values summing to 1")

    def to_dict(self) -> dict:
        return {
            "m": self.m,
            "n": self.n,
            "alpha": self.alpha,
            "rho": self.rho,
            "beta": self.beta,
            "seed": self.seed,
            "split_ratios": list(self.split_ratios),
        }


def _streams(seed: int) -> dict[str, np.random.Generator]:
    children = np.random.SeedSequence(seed).spawn(len(_STREAMS))
    return {
        name: np.random.Generator(np.random.Philox(child))
        for name, child in zip(_STREAMS, children)
    }


def _covariance(m: int, rho: float) -> np.ndarray:
    if rho == 0.0:
        return np.eye(m)
    idx = np.arange(m)
    sigma = np.maximum(0.01, rho ** np.abs(idx[:, None] - idx[None, :]))
    np.fill_diagonal(sigma, 1.0)
    return sigma


def _covariance_factor(m: int, rho: float) -> np.ndarray:
    sigma = _covariance(m, rho)
    try:
        return np.linalg.cholesky(sigma)
    except np.linalg.LinAlgError:
        warnings.warn(
            "correlation floor left the covariance non-positive-definite; "
            "regularizing with 1e-6 * I",
            ConfigurationWarning,
            stacklevel=2,
        )
        return np.linalg.cholesky(sigma + 1e-6 * np.eye(m))


@dataclass(frozen=True)
class GaussianConditionalLaws:
    """Closed-form conditional outcome laws of the beta = 0 process."""

    wy: np.ndarray
    alpha: float

    def arm_law(self, z, arm) -> tuple[float, float]:
        """(mean, sd) of the outcome under the given arm at Z = z."""
        mu1 = float(np.dot(self.wy, np.asarray(z, dtype=float).ravel()))
        if float(arm) == 1.0:
            return mu1, self.alpha
        return mu1 / self.alpha, 1.0

    def counterfactual_truth(self, x, y):
        """Exact rank-matched counterfactual outcome(s) for factual (x, y)."""
        x = np.asarray(x, dtype=float)
        y = np.asarray(y, dtype=float)
        out = np.where(x == 0.0, self.alpha * y, y / self.alpha)
        return float(out) if out.ndim == 0 else out


@dataclass(frozen=True)
class GroundTruth:
    """Per-dataset generating parameters plus the true assignment mechanism."""

    wx: np.ndarray
    wy: np.ndarray
    wy1: np.ndarray
    alpha: float
    beta: float

    def propensity(self, z, arm) -> np.ndarray | float:
        z = np.asarray(z, dtype=float)
        p1 = sigmoid(np.atleast_2d(z) @ self.wx)
        p = p1 if float(arm) == 1.0 else 1.0 - p1
        return float(p[0]) if z.ndim == 1 else p

    def laws(self) -> GaussianConditionalLaws:
        if self.beta != 0.0:
            raise ValidationError("no closed-form laws once rank preservation is violated")
        return GaussianConditionalLaws(wy=self.wy, alpha=self.alpha)


def _draw_weights(streams, m: int, beta: float):
    wx = streams["wx"].uniform(-1.0, 1.0, size=m)
    wy = streams["wy"].standard_normal(m)
    g = streams["wy1"].standard_normal(m)
    wy1 = math.sqrt(beta) * g
    return wx, wy, wy1


def simulate(config: SimConfig) -> tuple[ObservationalDataset, PotentialOutcomeTable, GroundTruth]:
    """Draw one dataset; returns (observations, potential outcomes, truth)."""
    streams = _streams(config.seed)
    wx, wy, wy1 = _draw_weights(streams, config.m, config.beta)

    z = streams["z"].standard_normal((config.n, config.m))
    if config.rho != 0.0:
        z = z @ _covariance_factor(config.m, config.rho).T
    pi = sigmoid(z @ wx)
    x = (streams["x"].uniform(size=config.n) < pi).astype(float)
    u0 = streams["u0"].standard_normal(config.n)
    u1 = config.alpha * u0
    y1 = z @ (wy + wy1) + u1
    y0 = z @ wy / config.alpha + u0
    y = np.where(x == 1.0, y1, y0)

    n_train = int(round(config.split_ratios[0] * config.n))
    n_val = int(round(config.split_ratios[1] * config.n))
    n_train = min(n_train, config.n - 1)
    n_val = min(n_val, config.n - n_train)
    perm = streams["split"].permutation(config.n)
    split = np.empty(config.n, dtype=object)
    split[perm[:n_train]] = TRAIN
    split[perm[n_train : n_train + n_val]] = VAL
    split[perm[n_train + n_val :]] = TEST

    dataset = ObservationalDataset(x, z, y, split)
    table = PotentialOutcomeTable(y0=y0, y1=y1)
    truth = GroundTruth(wx=wx, wy=wy, wy1=wy1, alpha=config.alpha, beta=config.beta)
    return dataset, table, truth


def analytic_laws(config: SimConfig) -> GaussianConditionalLaws:
    """Closed-form conditional laws for the configuration, without sampling.

    Only defined at beta = 0; the weight draw matches what simulate()
    produces for the same seed, at any sample size.
    """
    if config.beta != 0.0:
        raise ValidationError("no closed-form laws once rank preservation is violated")
    streams = _streams(config.seed)
    _, wy, _ = _draw_weights(streams, config.m, config.beta)
    return GaussianConditionalLaws(wy=wy, alpha=config.alpha)


def calibrate_beta(
    m: int,
    alpha: float,
    target_tau: float,
    seed: int,
    n: int = 100_000,
    rho: float = 0.0,
    tol: float = 0.005,
    max_expand: int = 24,
) -> float:
    """Find beta whose pooled rank correlation of (Y0, Y1) hits a target.

    Bisection over beta on one fixed draw of (Z, U0, weight directions), so
    the correlation is a monotone decreasing function of beta along the
    search path. Raises if the target is below what any beta can reach on
    this draw.
    """
    if not (0.0 < target_tau < 1.0):
        raise ValidationError("target rank correlation must lie in (0, 1)")
    streams = _streams(seed)
    wy = streams["wy"].standard_normal(m)
    g = streams["wy1"].standard_normal(m)
    z = streams["z"].standard_normal((n, m))
    if rho != 0.0:
        z = z @ _covariance_factor(m, rho).T
    u0 = streams["u0"].standard_normal(n)
    y0 = z @ wy / alpha + u0
    zg = z @ g
    zwy = z @ wy

    def tau_at(beta: float) -> float:
        y1 = zwy + math.sqrt(beta) * zg + alpha * u0
        return kendall(y0, y1, engine="mergesort").rho

    lo, hi = 0.0, 1.0
    t_hi = tau_at(hi)
    expansions = 0
    while t_hi > target_tau:
        lo, hi = hi, hi * 4.0
        t_hi = tau_at(hi)
        expansions += 1
        if expansions > max_expand:
            raise ValidationError(
                f"target rank correlation {target_tau} unreachable on this draw "
                f"(floor around {t_hi:.3f})"
            )
    for _ in range(60):
        mid = 0.5 * (lo + hi)
        t_mid = tau_at(mid)
        if abs(t_mid - target_tau) < tol:
            return mid
        if t_mid > target_tau:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)
