import math

import numpy as np
import pytest

from rankcf.dataset import Evidence, ObservationalDataset
from rankcf.errors import CoverageError, ValidationError
from rankcf.estimator import (
    CounterfactualEstimate,
    LossProfile,
    build_profile,
    build_profile_continuous,
    build_profile_weighted,
    estimate_counterfactual,
    estimate_units,
    ideal_loss_population,
    minimize_profile,
    population_loss_derivative,
    population_minimizer,
    select_bandwidth,
)
from rankcf.kernels import KernelSpec
from rankcf.simulator import SimConfig, simulate

from conftest import TwoStratumDesign

FLAT = KernelSpec("gaussian", 1e6)


def oracle_half(z, arm):
    return np.full(np.atleast_2d(z).shape[0], 0.5)


def balanced_dataset(n=400, seed=0):
    rng = np.random.default_rng(seed)
    x = np.tile([0.0, 1.0], n // 2)
    z = rng.standard_normal((n, 2))
    y = rng.standard_normal(n) + x
    return ObservationalDataset(x, z, y, np.full(n, "train", dtype=object))


class FixedLaws:
    """Ad-hoc Gaussian conditional laws for population-loss tests."""

    def __init__(self, mu0, sd0, mu1, sd1):
        self.params = {0.0: (mu0, sd0), 1.0: (mu1, sd1)}

    def arm_law(self, z, arm):
        return self.params[float(arm)]


# ---------------------------------------------------------------------------
# profile construction
# ---------------------------------------------------------------------------


def test_flat_kernel_slope_one():
    ds = balanced_dataset()
    y_low = ds.outcomes.min() - 10.0
    ev = Evidence(x=0.0, z=np.zeros(2), y=y_low, x_prime=1.0)
    profile = build_profile(ds, ev, FLAT, oracle_half)
    assert profile.b == pytest.approx(1.0, abs=1e-3)


def test_profile_normalizer_spans_all_rows():
    ds = balanced_dataset(n=50)
    ev = Evidence(x=0.0, z=np.zeros(2), y=0.0, x_prime=1.0)
    profile = build_profile(ds, ev, FLAT, oracle_half)
    # every target-arm knot got weight 2/normalizer under oracle 0.5
    assert profile.knots.shape[0] == 25
    assert profile.total_a == pytest.approx(1.0, rel=1e-6)


def test_coverage_error_when_target_arm_outside_window():
    x = np.array([0.0, 0.0, 0.0, 1.0])
    z = np.array([[0.0], [0.1], [-0.1], [5.0]])
    y = np.array([1.0, 2.0, 3.0, 4.0])
    ds = ObservationalDataset(x, z, y, np.full(4, "train", dtype=object))
    ev = Evidence(x=0.0, z=np.zeros(1), y=1.5, x_prime=1.0)
    with pytest.raises(CoverageError):
        build_profile(ds, ev, KernelSpec("epanechnikov", 1.0), oracle_half)


def test_coverage_error_when_kernel_mass_zero():
    ds = balanced_dataset(n=10)
    ev = Evidence(x=0.0, z=np.full(2, 100.0), y=0.0, x_prime=1.0)
    with pytest.raises(CoverageError):
        build_profile(ds, ev, KernelSpec("epanechnikov", 1.0), oracle_half)


def test_tied_factual_outcome_contributes_zero_sign():
    ds = balanced_dataset(n=8, seed=4)
    y_star = float(ds.outcomes[0])  # row 0 is factual arm (x=0)
    ev = Evidence(x=0.0, z=np.zeros(2), y=y_star, x_prime=1.0)
    profile = build_profile(ds, ev, FLAT, oracle_half)
    signs = np.sign(ds.outcomes[ds.treatments == 0.0] - y_star)
    assert np.sum(signs == 0) == 1  # the tied row is there and contributes nothing


def test_same_arm_rejected_unless_allowed():
    ds = balanced_dataset(n=20)
    ev = Evidence(x=1.0, z=np.zeros(2), y=0.0, x_prime=1.0)
    with pytest.raises(ValidationError):
        build_profile(ds, ev, FLAT, oracle_half)
    profile = build_profile(ds, ev, FLAT, oracle_half, allow_same_arm=True)
    assert profile.total_a > 0


# ---------------------------------------------------------------------------
# exact minimizer
# ---------------------------------------------------------------------------


def simple_profile(knots, a, b):
    return LossProfile(knots=np.asarray(knots, float), a=np.asarray(a, float), b=b,
                       normalizer=1.0)


def test_weighted_median():
    est = minimize_profile(simple_profile([1, 2, 3], [1, 1, 1], 0.0))
    assert est.y_hat == 2.0
    assert est.bounded


def test_flat_minimum_left_endpoint():
    est = minimize_profile(simple_profile([1, 2, 3], [1, 1, 1], 1.0))
    assert est.y_hat == 1.0  # minimum is flat on [1, 2]; inf convention
    f = simple_profile([1, 2, 3], [1, 1, 1], 1.0).evaluate
    grid = np.arange(0.0, 4.0, 1e-4)
    vals = f(grid)
    flat = grid[np.abs(vals - vals.min()) < 1e-9]
    assert flat.min() == pytest.approx(1.0, abs=1e-4)
    assert flat.max() == pytest.approx(2.0, abs=1e-4)


def test_unbounded_clamps_to_descending_side():
    est = minimize_profile(simple_profile([1, 2, 3], [1, 1, 1], 4.0))
    assert not est.bounded
    assert est.y_hat == 1.0
    est = minimize_profile(simple_profile([1, 2, 3], [1, 1, 1], -4.0))
    assert not est.bounded
    assert est.y_hat == 3.0


def test_single_knot():
    est = minimize_profile(simple_profile([7.5], [2.0], 1.0))
    assert est.y_hat == 7.5
    assert est.bounded


def test_minimizer_matches_grid_oracle():
    rng = np.random.default_rng(12)
    for _ in range(40):
        n = int(rng.integers(1, 40))
        knots = np.sort(np.round(rng.normal(0, 3, n), 2))
        a = rng.exponential(1.0, n) + 1e-3
        b = float(rng.uniform(-0.95, 0.95) * a.sum())
        profile = simple_profile(knots, a, b)
        est = minimize_profile(profile)
        grid = np.linspace(knots.min() - 1, knots.max() + 1, 20_001)
        j = int(np.argmin(profile.evaluate(grid)))
        step = grid[1] - grid[0]
        assert abs(est.y_hat - grid[j]) <= step + 1e-12


def test_profile_convexity_property():
    rng = np.random.default_rng(13)
    for _ in range(30):
        n = int(rng.integers(1, 30))
        knots = np.sort(rng.normal(0, 2, n))
        a = rng.exponential(1.0, n)
        b = float(rng.normal() * a.sum())
        profile = simple_profile(knots, a, b)
        t = np.sort(rng.uniform(knots.min() - 2, knots.max() + 2, 3))
        f1, f2, f3 = profile.evaluate(t)
        chord = f1 + (f3 - f1) * (t[1] - t[0]) / (t[2] - t[0])
        assert f2 <= chord + 1e-12


def test_n_effective():
    est = minimize_profile(simple_profile([1, 2, 3], [1, 1, 2], 0.0))
    assert est.n_effective_target_arm == pytest.approx(4 / 2)


# ---------------------------------------------------------------------------
# weighted profiles
# ---------------------------------------------------------------------------


def test_weight_one_is_identity():
    ds = balanced_dataset(n=60, seed=2)
    ev = Evidence(x=0.0, z=np.zeros(2), y=0.3, x_prime=1.0)
    base = build_profile(ds, ev, FLAT, oracle_half)
    weighted = build_profile_weighted(ds, ev, FLAT, oracle_half, lambda t, z: np.ones(len(t)))
    np.testing.assert_array_equal(base.knots, weighted.knots)
    np.testing.assert_allclose(base.a, weighted.a)
    assert base.b == pytest.approx(weighted.b)


def test_constant_weight_preserves_minimizer():
    ds = balanced_dataset(n=60, seed=3)
    ev = Evidence(x=0.0, z=np.zeros(2), y=0.3, x_prime=1.0)
    base = minimize_profile(build_profile(ds, ev, FLAT, oracle_half))
    scaled = minimize_profile(
        build_profile_weighted(ds, ev, FLAT, oracle_half, lambda t, z: np.full(len(t), 5.0))
    )
    assert base.y_hat == scaled.y_hat


def test_stratum_weight_preserves_minimizer(two_stratum_small):
    design = two_stratum_small
    kernel = KernelSpec("epanechnikov", 1.0)
    ev = Evidence(x=0.0, z=np.array([1.0]), y=1.4, x_prime=1.0)
    base = minimize_profile(build_profile(design.dataset, ev, kernel, design.propensity))
    for w_fn in (
        lambda t, z: 1.0 + 0.5 * (z[:, 0] > 0),
        lambda t, z: np.full(len(t), 5.0),
    ):
        other = minimize_profile(
            build_profile_weighted(design.dataset, ev, kernel, design.propensity, w_fn)
        )
        assert other.y_hat == base.y_hat


def test_nonpositive_weight_rejected():
    ds = balanced_dataset(n=20)
    ev = Evidence(x=0.0, z=np.zeros(2), y=0.0, x_prime=1.0)
    with pytest.raises(ValidationError):
        build_profile_weighted(ds, ev, FLAT, oracle_half, lambda t, z: np.zeros(len(t)))


# ---------------------------------------------------------------------------
# continuous-treatment variant
# ---------------------------------------------------------------------------


def continuous_copy(ds):
    return ObservationalDataset(
        ds.treatments.copy(), ds.covariates.copy(), ds.outcomes.copy(), ds.split.copy(),
        treatment_mode="continuous",
    )


def test_degenerate_continuous_matches_binary():
    ds = balanced_dataset(n=80, seed=5)
    cont = continuous_copy(ds)
    ev = Evidence(x=0.0, z=np.zeros(2), y=0.2, x_prime=1.0)
    kernel_z = KernelSpec("gaussian", 2.0)
    kernel_x = KernelSpec("epanechnikov", 1e-3)
    binary = build_profile(ds, ev, kernel_z, oracle_half)
    cont_p = build_profile_continuous(
        cont, ev, kernel_z, kernel_x,
        denominator_target=lambda z: oracle_half(z, 1),
        denominator_factual=lambda z: oracle_half(z, 0),
    )
    np.testing.assert_array_equal(binary.knots, cont_p.knots)
    # same minimizer; coefficients differ by the kernel height constant
    ratio = cont_p.a / binary.a
    np.testing.assert_allclose(ratio, ratio[0])
    assert minimize_profile(binary).y_hat == minimize_profile(cont_p).y_hat


def test_continuous_coverage_error():
    ds = continuous_copy(balanced_dataset(n=20, seed=6))
    ev = Evidence(x=40.0, z=np.zeros(2), y=0.0, x_prime=50.0)
    with pytest.raises(CoverageError):
        build_profile_continuous(ds, ev, FLAT, KernelSpec("epanechnikov", 0.5))


def test_continuous_constant_outcomes():
    n = 30
    rng = np.random.default_rng(7)
    ds = ObservationalDataset(
        rng.uniform(0, 1, n), rng.standard_normal((n, 1)), np.full(n, 4.2),
        np.full(n, "train", dtype=object), treatment_mode="continuous",
    )
    ev = Evidence(x=0.2, z=np.zeros(1), y=4.2, x_prime=0.8)
    profile = build_profile_continuous(
        ds, ev, KernelSpec("gaussian", 2.0), KernelSpec("gaussian", 0.5)
    )
    est = minimize_profile(profile)
    assert est.y_hat == 4.2


def test_continuous_requires_continuous_mode():
    ds = balanced_dataset(n=20)
    ev = Evidence(x=0.0, z=np.zeros(2), y=0.0, x_prime=1.0)
    with pytest.raises(ValidationError):
        build_profile_continuous(ds, ev, FLAT, FLAT)


# ---------------------------------------------------------------------------
# population objective
# ---------------------------------------------------------------------------


def test_population_loss_half_normal():
    laws = FixedLaws(mu0=0.0, sd0=1.0, mu1=0.0, sd1=1.0)
    ev = Evidence(x=0.0, z=np.zeros(1), y=0.0, x_prime=1.0)  # y at the factual median
    val = ideal_loss_population(0.0, ev, laws)
    assert val == pytest.approx(math.sqrt(2 / math.pi), abs=1e-12)


def test_population_derivative_matches_finite_difference():
    rng = np.random.default_rng(8)
    for _ in range(25):
        laws = FixedLaws(
            mu0=rng.normal(), sd0=rng.uniform(0.5, 2), mu1=rng.normal(), sd1=rng.uniform(0.5, 2)
        )
        ev = Evidence(x=0.0, z=np.zeros(1), y=rng.normal(), x_prime=1.0)
        t = rng.normal()
        eps = 1e-5
        fd = (
            ideal_loss_population(t + eps, ev, laws) - ideal_loss_population(t - eps, ev, laws)
        ) / (2 * eps)
        assert population_loss_derivative(t, ev, laws) == pytest.approx(fd, abs=1e-6)


def test_population_minimizer_first_order_condition():
    laws = FixedLaws(mu0=0.3, sd0=1.2, mu1=-0.5, sd1=0.7)
    ev = Evidence(x=0.0, z=np.zeros(1), y=1.1, x_prime=1.0)
    t_star = population_minimizer(ev, laws)
    assert population_loss_derivative(t_star, ev, laws) == pytest.approx(0.0, abs=1e-9)


def test_population_loss_rejects_unknown_laws():
    ev = Evidence(x=0.0, z=np.zeros(1), y=0.0, x_prime=1.0)
    with pytest.raises(ValidationError):
        ideal_loss_population(0.0, ev, laws=object())


# ---------------------------------------------------------------------------
# end-to-end estimation
# ---------------------------------------------------------------------------


def test_additive_noise_two_strata_recovery():
    # Y = X + Z + U on Z in {0, 1}: the counterfactual of (x=0, z, y) is y + 1
    rng = np.random.default_rng(9)
    n = 100_000
    z = rng.integers(0, 2, n).astype(float)
    x = (rng.uniform(size=n) < 0.5).astype(float)
    y = x + z + rng.standard_normal(n)
    ds = ObservationalDataset(x, z[:, None], y, np.full(n, "train", dtype=object))
    kernel = KernelSpec("epanechnikov", 0.5)
    for q in (-0.3, 1.0, 1.7):
        ev = Evidence(x=0.0, z=np.array([1.0]), y=q, x_prime=1.0)
        est = estimate_counterfactual(ds, ev, kernel, oracle_half)
        assert est.y_hat == pytest.approx(q + 1.0, abs=0.05)


def test_batch_matches_single_queries():
    cfg = SimConfig(m=3, n=3000, alpha=1.5, seed=21)
    ds, _, truth = simulate(cfg)
    pool = ds.subset(ds.split_mask("train"))
    idx = np.flatnonzero(ds.split_mask("test"))[:40]
    x, z, y = ds.treatments[idx], ds.covariates[idx], ds.outcomes[idx]
    kernel = KernelSpec("gaussian", 2.0)
    batch, bounded, cov, neff = estimate_units(pool, x, z, y, 1 - x, kernel, truth.propensity)
    batch_mt, _, _, _ = estimate_units(
        pool, x, z, y, 1 - x, kernel, truth.propensity, threads=4
    )
    np.testing.assert_array_equal(batch, batch_mt)
    for k in range(len(idx)):
        ev = Evidence(x=x[k], z=z[k], y=y[k], x_prime=1 - x[k])
        single = estimate_counterfactual(pool, ev, kernel, truth.propensity)
        assert batch[k] == pytest.approx(single.y_hat, abs=1e-9)
        assert bounded[k] == single.bounded
        assert cov[k] == single.coverage_ok
        assert neff[k] == pytest.approx(single.n_effective_target_arm, rel=1e-9)


def test_batch_flags_uncovered_queries():
    ds = balanced_dataset(n=40, seed=10)
    kernel = KernelSpec("epanechnikov", 0.3)
    x = np.array([0.0, 0.0])
    z = np.array([[50.0, 50.0], [0.0, 0.0]])
    y = np.array([0.0, 0.0])
    est, bounded, cov, _ = estimate_units(ds, x, z, y, 1 - x, kernel, oracle_half)
    assert not cov[0] and math.isnan(est[0])


def test_estimate_units_validates_queries():
    ds = balanced_dataset(n=20)
    with pytest.raises(ValidationError):
        estimate_units(ds, [0.0], np.zeros((1, 2)), [0.0], [0.0], FLAT, oracle_half)


def test_consistency_of_estimated_loss():
    # median sup-gap between estimated and population objectives shrinks with N
    base = SimConfig(m=2, n=500, alpha=2.0, seed=0)
    h0 = 2.0
    t_grid = np.linspace(-6, 6, 41)
    sup_gaps = {n: [] for n in (500, 2000, 8000, 32000)}
    for seed in range(20):
        for n in sup_gaps:
            cfg = SimConfig(m=2, n=n, alpha=2.0, seed=1000 + seed)
            ds, _, truth = simulate(cfg)
            laws = truth.laws()
            z_star = np.array([0.25, -0.4])
            mu0, _ = laws.arm_law(z_star, 0)
            ev = Evidence(x=0.0, z=z_star, y=mu0 + 0.3, x_prime=1.0)
            h = h0 * n ** (-1.0 / (2 + 4))
            profile = build_profile(
                ds, ev, KernelSpec("gaussian", h), truth.propensity
            )
            est_vals = profile.evaluate(t_grid)
            pop_vals = np.array([ideal_loss_population(t, ev, laws) for t in t_grid])
            sup_gaps[n].append(float(np.max(np.abs(est_vals - pop_vals))))
    medians = [float(np.median(sup_gaps[n])) for n in (500, 2000, 8000, 32000)]
    assert all(b < a for a, b in zip(medians, medians[1:])), medians


def test_select_bandwidth_returns_grid_member():
    cfg = SimConfig(m=2, n=4000, alpha=2.0, seed=5)
    ds, _, truth = simulate(cfg)
    pool = ds.subset(ds.split_mask("train"))
    val = np.flatnonzero(ds.split_mask("val"))
    h, scores = select_bandwidth(
        pool, ds.treatments[val], ds.covariates[val], ds.outcomes[val],
        "gaussian", (1.0, 3.0, 5.0), truth.propensity, max_queries=300,
    )
    assert h in (1.0, 3.0, 5.0)
    assert set(scores) == {1.0, 3.0, 5.0}
    assert all(math.isfinite(v) for v in scores.values())
