"""Estimation of individual counterfactual outcomes.

The estimated objective for a query with evidence (x, z, y) and target
treatment x' is piecewise linear in the candidate outcome t:

    f(t) = sum_k a_k |y_k - t| + b t

where the absolute-deviation weights a_k come from kernel-smoothed inverse
propensity weights on target-arm rows, and the slope b is the same kind of
average of sign(y_k - y) over factual-arm rows. Both terms share one
normalizer, the total kernel mass at the query. The function is convex, so
its exact minimizer is a weighted-quantile selection over the knots; no
iterative optimization is involved anywhere.

Conventions baked in here:
  * flat minima resolve to the LEFT endpoint, matching the inf-based
    quantile definition;
  * |b| >= sum(a) makes the objective unbounded on one side; the estimate is
    clamped to the extreme knot on the descending side and flagged rather
    than raised, since at small samples the sign-average can exceed 1 in
    magnitude by noise alone;
  * a query whose kernel mass or target-arm mass is zero raises
    CoverageError instead of returning a 0/0 artifact.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .dataset import BINARY, CONTINUOUS, Evidence, ObservationalDataset
from .errors import CoverageError, ValidationError
from .kernels import KernelSpec, weight_matrix

__all__ = [
    "LossProfile",
    "CounterfactualEstimate",
    "build_profile",
    "build_profile_weighted",
    "build_profile_continuous",
    "minimize_profile",
    "estimate_counterfactual",
    "estimate_units",
    "select_bandwidth",
    "ideal_loss_population",
    "population_loss_derivative",
    "population_minimizer",
]


@dataclass(frozen=True)
class LossProfile:
    """Coefficients of one query's piecewise-linear objective."""

    knots: np.ndarray
    a: np.ndarray
    b: float
    normalizer: float

    def __post_init__(self):
        knots = np.asarray(self.knots, dtype=float).ravel()
        a = np.asarray(self.a, dtype=float).ravel()
        object.__setattr__(self, "knots", knots)
        object.__setattr__(self, "a", a)
        if knots.shape != a.shape:
            raise ValidationError("knots and weights must align")
        if np.any(a < 0):
            raise ValidationError("absolute-deviation weights must be nonnegative")
        if np.any(np.diff(knots) < 0):
            raise ValidationError("knots must be sorted ascending")

    @property
    def total_a(self) -> float:
        return float(np.sum(self.a))

    def evaluate(self, t) -> np.ndarray | float:
        """f(t) for scalar or vector t."""
        t = np.asarray(t, dtype=float)
        single = t.ndim == 0
        tv = np.atleast_1d(t)
        vals = np.abs(self.knots[None, :] - tv[:, None]) @ self.a + self.b * tv
        return float(vals[0]) if single else vals


@dataclass(frozen=True)
class CounterfactualEstimate:
    """Result of minimizing one query's profile."""

    y_hat: float
    loss_at_min: float
    n_effective_target_arm: float
    bounded: bool
    coverage_ok: bool


def _kernel_mass(kernel: KernelSpec, query_z: np.ndarray, covariates: np.ndarray) -> np.ndarray:
    return weight_matrix(kernel, np.atleast_2d(query_z), covariates)[0]


def _assemble(
    weights: np.ndarray,
    pool: ObservationalDataset,
    evidence: Evidence,
    target_num: np.ndarray,
    factual_num: np.ndarray,
) -> LossProfile:
    """Common profile assembly given per-row numerator masses.

    target_num[k] multiplies |y_k - t|; factual_num[k] multiplies
    sign(y_k - y). Rows with zero mass are dropped from the knot set.
    """
    normalizer = float(np.sum(weights))
    if normalizer <= 0.0:
        raise CoverageError("kernel mass at the query is zero")
    b = float(np.sum(factual_num * np.sign(pool.outcomes - evidence.y))) / normalizer
    keep = target_num > 0.0
    if not np.any(keep):
        raise CoverageError("no target-arm mass inside the kernel support")
    knots = pool.outcomes[keep]
    a = target_num[keep] / normalizer
    order = np.argsort(knots, kind="stable")
    return LossProfile(knots=knots[order], a=a[order], b=b, normalizer=normalizer)


def build_profile(
    pool: ObservationalDataset,
    evidence: Evidence,
    kernel: KernelSpec,
    propensity,
    allow_same_arm: bool = False,
    row_weights: np.ndarray | None = None,
) -> LossProfile:
    """Build the estimated objective for one binary-treatment query.

    Parameters
    ----------
    pool : reference sample (typically the train split)
    evidence : factual triple plus target treatment
    kernel : smoothing kernel over covariates
    propensity : callable (z_rows, arm) -> probabilities
    allow_same_arm : permit x_prime == x (used by the factual-reconstruction
        bandwidth criterion, never by real queries)
    row_weights : optional positive per-row multipliers applied to both terms
        before normalization (see build_profile_weighted)
    """
    if pool.treatment_mode != BINARY:
        raise ValidationError("build_profile requires binary treatment mode")
    if evidence.x not in (0.0, 1.0) or evidence.x_prime not in (0.0, 1.0):
        raise ValidationError("binary mode: evidence treatments must be 0 or 1")
    if not allow_same_arm and evidence.x_prime == evidence.x:
        raise ValidationError("counterfactual query needs x_prime != x")
    if len(evidence.z) != pool.m:
        raise ValidationError(f"evidence has {len(evidence.z)} coordinates, pool has {pool.m}")

    weights = _kernel_mass(kernel, evidence.z, pool.covariates)
    if row_weights is not None:
        row_weights = np.asarray(row_weights, dtype=float).ravel()
        if row_weights.shape != weights.shape:
            raise ValidationError("row_weights must have one entry per pool row")
        if np.any(row_weights <= 0):
            raise ValidationError("row_weights must be strictly positive")
        numer = weights * row_weights
    else:
        numer = weights

    t_mask = pool.treatments == evidence.x_prime
    f_mask = pool.treatments == evidence.x
    target_num = np.zeros_like(weights)
    factual_num = np.zeros_like(weights)
    if np.any(t_mask):
        target_num[t_mask] = numer[t_mask] / np.asarray(
            propensity(pool.covariates[t_mask], int(evidence.x_prime)), dtype=float
        )
    if np.any(f_mask):
        factual_num[f_mask] = numer[f_mask] / np.asarray(
            propensity(pool.covariates[f_mask], int(evidence.x)), dtype=float
        )
    return _assemble(weights, pool, evidence, target_num, factual_num)


def build_profile_weighted(
    pool: ObservationalDataset,
    evidence: Evidence,
    kernel: KernelSpec,
    propensity,
    w,
) -> LossProfile:
    """Profile with every row's contribution multiplied by w(x_k, z_k) > 0.

    At the population level such weights leave the minimizer unchanged; this
    entry point exists to exercise that invariance.
    """
    rw = np.asarray(w(pool.treatments, pool.covariates), dtype=float).ravel()
    return build_profile(pool, evidence, kernel, propensity, row_weights=rw)


def build_profile_continuous(
    pool: ObservationalDataset,
    evidence: Evidence,
    kernel_z: KernelSpec,
    kernel_x: KernelSpec,
    denominator_target=None,
    denominator_factual=None,
) -> LossProfile:
    """Continuous-treatment variant: treatment indicators become kernels in x.

    The inverse-probability denominators have no canonical continuous
    analogue here, so they are caller-supplied functions of z and default
    to 1 (pure kernel weighting).
    """
    if pool.treatment_mode != CONTINUOUS:
        raise ValidationError("build_profile_continuous requires continuous treatment mode")
    if len(evidence.z) != pool.m:
        raise ValidationError(f"evidence has {len(evidence.z)} coordinates, pool has {pool.m}")

    weights = _kernel_mass(kernel_z, evidence.z, pool.covariates)
    tx = pool.treatments[:, None]
    kx_target = weight_matrix(kernel_x, np.array([[evidence.x_prime]]), tx)[0]
    kx_factual = weight_matrix(kernel_x, np.array([[evidence.x]]), tx)[0]
    denom_t = (
        np.asarray(denominator_target(pool.covariates), dtype=float)
        if denominator_target is not None
        else 1.0
    )
    denom_f = (
        np.asarray(denominator_factual(pool.covariates), dtype=float)
        if denominator_factual is not None
        else 1.0
    )
    target_num = weights * kx_target / denom_t
    factual_num = weights * kx_factual / denom_f
    return _assemble(weights, pool, evidence, target_num, factual_num)


def minimize_profile(profile: LossProfile) -> CounterfactualEstimate:
    """Exact minimizer of f(t) = sum a_k |y_k - t| + b t.

    With A = sum(a), the subgradient on the open interval above the j-th
    sorted knot is 2*A_j - A + b, so the minimizer is the smallest knot whose
    cumulative weight reaches (A - b)/2. When |b| >= A the objective descends
    forever on one side; the estimate clamps to the extreme knot on that side
    and carries bounded=False.
    """
    a = profile.a
    knots = profile.knots
    if len(a) == 0 or not np.any(a > 0):
        raise CoverageError("profile carries no target-arm mass")
    cum = np.cumsum(a)
    total = float(cum[-1])
    n_eff = total / float(np.max(a))
    b = profile.b
    if abs(b) >= total:
        positive = np.flatnonzero(a > 0)
        y_hat = float(knots[positive[0]]) if b > 0 else float(knots[positive[-1]])
        return CounterfactualEstimate(
            y_hat=y_hat,
            loss_at_min=float(profile.evaluate(y_hat)),
            n_effective_target_arm=n_eff,
            bounded=False,
            coverage_ok=True,
        )
    threshold = 0.5 * (total - b)
    j = int(np.searchsorted(cum, threshold, side="left"))
    j = min(j, len(knots) - 1)
    y_hat = float(knots[j])
    return CounterfactualEstimate(
        y_hat=y_hat,
        loss_at_min=float(profile.evaluate(y_hat)),
        n_effective_target_arm=n_eff,
        bounded=True,
        coverage_ok=True,
    )


def estimate_counterfactual(
    pool: ObservationalDataset,
    evidence: Evidence,
    kernel: KernelSpec,
    propensity,
    allow_same_arm: bool = False,
) -> CounterfactualEstimate:
    """Build one query's profile and minimize it."""
    profile = build_profile(pool, evidence, kernel, propensity, allow_same_arm=allow_same_arm)
    return minimize_profile(profile)


def estimate_units(
    pool: ObservationalDataset,
    x: np.ndarray,
    z: np.ndarray,
    y: np.ndarray,
    x_prime: np.ndarray,
    kernel: KernelSpec,
    propensity,
    allow_same_arm: bool = False,
    kernel_ratio_weight: bool = False,
    chunk_floats: int = 4_000_000,
    threads: int = 1,
) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Vectorized batch of binary-treatment queries.

    Same arithmetic as build_profile + minimize_profile, grouped by the
    (x, x_prime) arm pair and processed in query chunks. Queries without
    coverage produce NaN and coverage_ok=False instead of raising, so long
    evaluation loops degrade per-unit.

    kernel_ratio_weight multiplies every row's contribution by the
    normalized kernel mass K_h(z_k - z) * N / sum_j K_h(z_j - z), the
    canonical example of a weighting that leaves the population minimizer
    unchanged.

    threads > 1 runs query chunks on a thread pool; every chunk writes a
    disjoint index range, so results do not depend on scheduling order.

    Returns (y_hat, bounded, coverage_ok, n_effective) arrays aligned with
    the query order.
    """
    if pool.treatment_mode != BINARY:
        raise ValidationError("estimate_units requires binary treatment mode")
    x = np.asarray(x, dtype=float).ravel()
    y = np.asarray(y, dtype=float).ravel()
    x_prime = np.asarray(x_prime, dtype=float).ravel()
    z = np.atleast_2d(np.asarray(z, dtype=float))
    nq = len(x)
    if not (len(y) == len(x_prime) == z.shape[0] == nq):
        raise ValidationError("query arrays must be aligned")
    if not allow_same_arm and np.any(x == x_prime):
        raise ValidationError("counterfactual queries need x_prime != x")

    y_hat = np.full(nq, np.nan)
    bounded = np.zeros(nq, dtype=bool)
    coverage = np.zeros(nq, dtype=bool)
    n_eff = np.full(nq, np.nan)

    arm_cache: dict[int, dict] = {}

    def arm_info(arm: int) -> dict:
        if arm not in arm_cache:
            mask = pool.treatments == float(arm)
            idx = np.flatnonzero(mask)
            ipw = 1.0 / np.asarray(propensity(pool.covariates[idx], arm), dtype=float)
            order = np.argsort(pool.outcomes[idx], kind="stable")
            arm_cache[arm] = {
                "idx": idx,
                "ipw": ipw,
                "order": order,
                "y_sorted": pool.outcomes[idx][order],
            }
        return arm_cache[arm]

    def run_chunk(rows: np.ndarray, tgt: dict, fac: dict) -> None:
        t_ipw_sorted = tgt["ipw"][tgt["order"]]
        t_idx_sorted = tgt["idx"][tgt["order"]]
        yt = tgt["y_sorted"]
        f_idx = fac["idx"]
        yf = pool.outcomes[f_idx]
        f_ipw = fac["ipw"]
        W = weight_matrix(kernel, z[rows], pool.covariates)
        D = W.sum(axis=1)
        if kernel_ratio_weight:
            with np.errstate(invalid="ignore", divide="ignore"):
                Wnum = W * W * (pool.n / np.where(D > 0, D, np.nan))[:, None]
        else:
            Wnum = W
        Wt = Wnum[:, t_idx_sorted] * t_ipw_sorted[None, :]
        sign = np.sign(yf[None, :] - y[rows][:, None])
        bvec = (Wnum[:, f_idx] * f_ipw[None, :] * sign).sum(axis=1)
        cum = np.cumsum(Wt, axis=1)
        A = cum[:, -1]
        ok = (D > 0) & (A > 0)
        thr = 0.5 * (A - bvec)
        j = np.argmax(cum >= thr[:, None], axis=1)
        vals = yt[j]
        has_mass = Wt > 0
        first_pos = np.argmax(has_mass, axis=1)
        last_pos = Wt.shape[1] - 1 - np.argmax(has_mass[:, ::-1], axis=1)
        unb = np.abs(bvec) >= A
        vals = np.where(unb & (bvec > 0), yt[first_pos], vals)
        vals = np.where(unb & (bvec <= 0), yt[last_pos], vals)
        y_hat[rows] = np.where(ok, vals, np.nan)
        bounded[rows] = ~unb & ok
        coverage[rows] = ok
        with np.errstate(invalid="ignore", divide="ignore"):
            n_eff[rows] = np.where(ok, A / Wt.max(axis=1), np.nan)

    chunk = max(1, int(chunk_floats // max(pool.n, 1)))
    tasks = []
    for fx, tx in sorted({(float(a), float(b_)) for a, b_ in zip(x, x_prime)}):
        sel = np.flatnonzero((x == fx) & (x_prime == tx))
        tgt = arm_info(int(tx))
        fac = arm_info(int(fx))
        if len(tgt["idx"]) == 0:
            continue  # no coverage possible for this group
        for lo in range(0, len(sel), chunk):
            tasks.append((sel[lo : lo + chunk], tgt, fac))

    if threads > 1 and len(tasks) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool_exec:
            futures = [pool_exec.submit(run_chunk, *task) for task in tasks]
            for fut in futures:
                fut.result()
    else:
        for task in tasks:
            run_chunk(*task)
    return y_hat, bounded, coverage, n_eff


def select_bandwidth(
    pool: ObservationalDataset,
    val_x: np.ndarray,
    val_z: np.ndarray,
    val_y: np.ndarray,
    family: str,
    grid,
    propensity,
    max_queries: int = 2000,
) -> tuple[float, dict[float, float]]:
    """Pick a bandwidth by round-trip reconstruction on held-out units.

    True counterfactuals are unobservable, so each held-out unit's factual
    outcome is reconstructed through two counterfactual hops: estimate the
    opposite-arm outcome from the evidence, then feed that estimate back as
    pseudo-evidence and estimate the original arm again. Rank matching makes
    the round trip the identity in population, so the mean absolute gap to
    the observed outcome scores how much the machinery distorts per hop.
    Both hops exercise the cross-arm estimator, so a bandwidth that starves
    the kernel (or oversmooths past what the propensity weights can correct)
    scores badly; a same-arm reconstruction would not see either failure.

    Smallest mean absolute round-trip error wins, first grid value on ties;
    oversized validation sets shrink to a deterministic evenly-spaced
    subset. Units losing coverage on either hop drop out of that bandwidth's
    score.
    """
    val_x = np.asarray(val_x, dtype=float).ravel()
    val_y = np.asarray(val_y, dtype=float).ravel()
    val_z = np.atleast_2d(np.asarray(val_z, dtype=float))
    nq = len(val_x)
    if nq == 0:
        raise ValidationError("bandwidth selection needs at least one held-out unit")
    if nq > max_queries:
        keep = np.unique(np.linspace(0, nq - 1, max_queries).astype(int))
        val_x, val_z, val_y = val_x[keep], val_z[keep], val_y[keep]

    scores: dict[float, float] = {}
    best_h, best_err = None, math.inf
    for h in grid:
        kernel = KernelSpec(family=family, bandwidth=float(h))
        forward, _, cov_fwd, _ = estimate_units(
            pool, val_x, val_z, val_y, 1.0 - val_x, kernel, propensity
        )
        back = np.full(len(val_x), np.nan)
        good = cov_fwd & np.isfinite(forward)
        if np.any(good):
            ret, _, cov_back, _ = estimate_units(
                pool,
                1.0 - val_x[good],
                val_z[good],
                forward[good],
                val_x[good],
                kernel,
                propensity,
            )
            back[good] = np.where(cov_back, ret, np.nan)
        ok = np.isfinite(back)
        err = float(np.mean(np.abs(back[ok] - val_y[ok]))) if np.any(ok) else math.inf
        scores[float(h)] = err
        if err < best_err:
            best_h, best_err = float(h), err
    if best_h is None or not math.isfinite(best_err):
        raise CoverageError("no bandwidth in the grid covers the held-out units")
    return best_h, scores


# ---------------------------------------------------------------------------
# population (analytic) objective, used as the oracle in consistency tests
# ---------------------------------------------------------------------------


def _norm_cdf(v: float) -> float:
    return 0.5 * (1.0 + math.erf(v / math.sqrt(2.0)))


def _norm_pdf(v: float) -> float:
    return math.exp(-0.5 * v * v) / math.sqrt(2.0 * math.pi)


def _laws_or_raise(laws):
    if not hasattr(laws, "arm_law"):
        raise ValidationError(
            "population loss needs an analytic law object exposing arm_law(z, arm)"
        )
    return laws


def ideal_loss_population(t: float, evidence: Evidence, laws) -> float:
    """Population objective E|Y_target - t| + E[sign(Y_factual - y)] * t.

    Requires closed-form Gaussian conditionals, as produced by the
    simulator's analytic description.
    """
    _laws_or_raise(laws)
    mu_t, sd_t = laws.arm_law(evidence.z, evidence.x_prime)
    mu_f, sd_f = laws.arm_law(evidence.z, evidence.x)
    d = (t - mu_t) / sd_t
    mad = sd_t * (2.0 * _norm_pdf(d) + d * (2.0 * _norm_cdf(d) - 1.0))
    sign_term = 1.0 - 2.0 * _norm_cdf((evidence.y - mu_f) / sd_f)
    return mad + sign_term * t


def population_loss_derivative(t: float, evidence: Evidence, laws) -> float:
    """d/dt of the population objective: 2 * (F_target(t) - F_factual(y))."""
    _laws_or_raise(laws)
    mu_t, sd_t = laws.arm_law(evidence.z, evidence.x_prime)
    mu_f, sd_f = laws.arm_law(evidence.z, evidence.x)
    return 2.0 * (_norm_cdf((t - mu_t) / sd_t) - _norm_cdf((evidence.y - mu_f) / sd_f))


def population_minimizer(evidence: Evidence, laws) -> float:
    """Exact rank-matched minimizer: mean_t + sd_t * (y - mean_f) / sd_f."""
    _laws_or_raise(laws)
    mu_t, sd_t = laws.arm_law(evidence.z, evidence.x_prime)
    mu_f, sd_f = laws.arm_law(evidence.z, evidence.x)
    return mu_t + sd_t * (evidence.y - mu_f) / sd_f
