"""Kernel functions and bandwidth-scaled smoothing weights.

Both families are symmetric densities (zero first moment, unit integral).
Multivariate arguments use a product kernel with a single shared bandwidth,
so weights are scale-sensitive: standardize covariates first if their units
differ wildly.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ValidationError

EPANECHNIKOV = "epanechnikov"
GAUSSIAN = "gaussian"

_FAMILIES = (EPANECHNIKOV, GAUSSIAN)

_GAUSS_NORM = 1.0 / math.sqrt(2.0 * math.pi)


@dataclass(frozen=True)
class KernelSpec:
    """Kernel family plus bandwidth h. Multivariate rule is fixed to product."""

    family: str = GAUSSIAN
    bandwidth: float = 1.0

    def __post_init__(self):
        if self.family not in _FAMILIES:
            raise ValidationError(f"unknown kernel family {self.family!r}")
        if not (self.bandwidth > 0 and math.isfinite(self.bandwidth)):
            raise ValidationError(f"bandwidth must be positive, got {self.bandwidth}")


def kernel_value(spec: KernelSpec, u) -> float | np.ndarray:
    """Evaluate the unscaled kernel K(u).

    Epanechnikov: 3(1 - u^2)/4 on |u| <= 1, else 0.
    Gaussian: exp(-u^2/2)/sqrt(2*pi).
    """
    u = np.asarray(u, dtype=float)
    if spec.family == EPANECHNIKOV:
        out = np.where(np.abs(u) <= 1.0, 0.75 * (1.0 - u * u), 0.0)
    else:
        out = _GAUSS_NORM * np.exp(-0.5 * u * u)
    return float(out) if out.ndim == 0 else out


def scaled_weight(spec: KernelSpec, delta) -> float:
    """Product kernel weight for one displacement vector.

    Returns prod_j K(delta_j / h) / h, i.e. K_h applied coordinate-wise.
    """
    delta = np.atleast_1d(np.asarray(delta, dtype=float))
    return float(weight_matrix(spec, delta[None, :], np.zeros((1, delta.shape[0])))[0, 0])


def weight_row(spec: KernelSpec, query_z: np.ndarray, covariates: np.ndarray) -> np.ndarray:
    """Smoothing weights of every covariate row relative to one query point.

    Parameters
    ----------
    query_z : array of shape (m,)
    covariates : array of shape (N, m)

    Returns
    -------
    array of shape (N,), entry k equals scaled_weight(spec, z_k - query_z).
    """
    covariates = np.asarray(covariates, dtype=float)
    query_z = np.asarray(query_z, dtype=float).ravel()
    if covariates.ndim != 2 or covariates.shape[1] != query_z.shape[0]:
        raise ValidationError(
            f"dimension mismatch: query has {query_z.shape[0]} coordinates, "
            f"rows have {covariates.shape[-1]}"
        )
    return weight_matrix(spec, query_z[None, :], covariates)[0]


def weight_matrix(spec: KernelSpec, queries: np.ndarray, covariates: np.ndarray) -> np.ndarray:
    """Weights of every covariate row for a batch of queries, shape (B, N).

    Equivalent to stacking weight_row over the query batch; used by the batch
    estimation path.
    """
    queries = np.asarray(queries, dtype=float)
    covariates = np.asarray(covariates, dtype=float)
    h = spec.bandwidth
    m = covariates.shape[1]
    if spec.family == GAUSSIAN:
        # prod_j exp(-(d_j/h)^2/2)/(sqrt(2pi) h): one exp over ||d||^2,
        # with the squared distances expanded through a matrix product
        qn = np.einsum("ij,ij->i", queries, queries)
        cn = np.einsum("ij,ij->i", covariates, covariates)
        d2 = qn[:, None] - 2.0 * (queries @ covariates.T) + cn[None, :]
        np.maximum(d2, 0.0, out=d2)
        d2 *= -0.5 / (h * h)
        np.exp(d2, out=d2)
        d2 *= (_GAUSS_NORM / h) ** m
        return d2
    out = np.full((queries.shape[0], covariates.shape[0]), h**-m)
    for j in range(m):
        u = (queries[:, j, None] - covariates[None, :, j]) / h
        out *= np.where(np.abs(u) <= 1.0, 0.75 * (1.0 - u * u), 0.0)
    return out
