"""Shared fixtures and data builders."""

import math

import numpy as np
import pytest

from rankcf.dataset import ObservationalDataset


def norm_cdf(v):
    return 0.5 * (1.0 + np.vectorize(math.erf)(np.asarray(v, dtype=float) / math.sqrt(2.0)))


def norm_ppf(q: float) -> float:
    """Inverse normal CDF by bisection; test-side oracle, no scipy needed."""
    lo, hi = -12.0, 12.0
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if 0.5 * (1.0 + math.erf(mid / math.sqrt(2.0))) < q:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


class TwoStratumDesign:
    """Discrete-Z design with known Gaussian arm laws and rank preservation.

    Z in {-1, +1} (scalar covariate); treatment probability pi(z); outcomes
    Y0 = mu0(z) + U, Y1 = mu1(z) + s1 * U with shared U ~ N(0, 1).
    """

    def __init__(self, n: int, seed: int, pi=(0.3, 0.25), mu0=(0.0, 1.0),
                 mu1=(1.0, 2.0), s1: float = 2.0):
        rng = np.random.default_rng(seed)
        z = rng.choice([-1.0, 1.0], size=n)
        self.pi_map = {-1.0: pi[0], 1.0: pi[1]}
        self.mu0_map = {-1.0: mu0[0], 1.0: mu0[1]}
        self.mu1_map = {-1.0: mu1[0], 1.0: mu1[1]}
        self.s1 = s1
        p = np.where(z < 0, pi[0], pi[1])
        x = (rng.uniform(size=n) < p).astype(float)
        u = rng.standard_normal(n)
        y0 = np.where(z < 0, mu0[0], mu0[1]) + u
        y1 = np.where(z < 0, mu1[0], mu1[1]) + s1 * u
        y = np.where(x == 1.0, y1, y0)
        self.dataset = ObservationalDataset(x, z[:, None], y, np.full(n, "train", dtype=object))
        self.y0, self.y1 = y0, y1

    def propensity(self, z, arm):
        z = np.atleast_2d(np.asarray(z, dtype=float))
        p1 = np.where(z[:, 0] < 0, self.pi_map[-1.0], self.pi_map[1.0])
        return p1 if int(arm) == 1 else 1.0 - p1

    def arm_params(self, z_value: float, arm: int) -> tuple[float, float]:
        if arm == 1:
            return self.mu1_map[z_value], self.s1
        return self.mu0_map[z_value], 1.0


@pytest.fixture
def two_stratum_small():
    return TwoStratumDesign(n=4000, seed=11)
