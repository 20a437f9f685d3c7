"""Kendall rank correlation, plain and tie-corrected.

The plain coefficient divides the concordant-minus-discordant pair count by
all n(n-1)/2 pairs; the tie-corrected variant divides out tied pairs in each
margin, so perfectly concordant data with ties still scores 1.

Two interchangeable engines: an O(n^2) pair enumeration (the reference) and a
merge-sort inversion counter used automatically for large inputs. Both work
on exact integer pair counts, so they agree bit-for-bit.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import AlignmentError, DegenerateInputError, ValidationError

# above this length kendall() switches to the merge-sort engine
_MERGESORT_CUTOFF = 3000


@dataclass(frozen=True)
class RankReport:
    """Pair counts and both correlation statistics for one sample."""

    rho: float
    rho_tilde: float
    n_concordant: int
    n_discordant: int
    ties_x: int
    ties_y: int

    def to_dict(self) -> dict:
        return {
            "rho": self.rho,
            "rho_tilde": self.rho_tilde,
            "n_concordant": self.n_concordant,
            "n_discordant": self.n_discordant,
            "ties_x": self.ties_x,
            "ties_y": self.ties_y,
        }


def sign3(t: float) -> int:
    """Three-valued sign: -1, 0, +1 for negative, zero, positive."""
    if t > 0:
        return 1
    if t < 0:
        return -1
    return 0


def _tied_pairs(values: np.ndarray) -> int:
    """Number of unordered pairs with equal value: sum of g(g-1)/2 over groups."""
    _, counts = np.unique(values, return_counts=True)
    return int(np.sum(counts * (counts - 1) // 2))


def _counts_quadratic(xs: np.ndarray, ys: np.ndarray) -> tuple[int, int]:
    """Concordant/discordant pair counts by explicit pair enumeration.

    Row-chunked so memory stays O(chunk * n) even near the engine cutoff.
    """
    n = len(xs)
    n_c = 0
    n_d = 0
    chunk = max(1, min(n, 2**22 // max(n, 1) + 1))
    for lo in range(0, n, chunk):
        hi = min(lo + chunk, n)
        sx = np.sign(xs[lo:hi, None] - xs[None, :])
        sy = np.sign(ys[lo:hi, None] - ys[None, :])
        prod = sx * sy
        # keep only ordered pairs (i < j)
        cols = np.arange(n)[None, :]
        rows = np.arange(lo, hi)[:, None]
        keep = cols > rows
        n_c += int(np.sum((prod > 0) & keep))
        n_d += int(np.sum((prod < 0) & keep))
    return n_c, n_d


def _merge_count(seq: np.ndarray) -> int:
    """Count strict inversions (left > right) of a sequence.

    Bottom-up merge sort with every level vectorized: values are rank-coded
    to small ints, rows get disjoint offset bands so one searchsorted call
    counts across all blocks of the level at once. Padding uses a sentinel
    larger than every real value; it only ever lands in a suffix, so it can
    never sit left of a real element.
    """
    n = len(seq)
    if n < 2:
        return 0
    _, codes = np.unique(seq, return_inverse=True)
    sentinel = np.int64(n)
    size = 1
    while size < n:
        size *= 2
    arr = np.full(size, sentinel, dtype=np.int64)
    arr[:n] = codes
    band = np.int64(n + 2)
    inversions = 0
    width = 1
    while width < size:
        blocks = arr.reshape(-1, 2 * width)
        left = blocks[:, :width]
        right = blocks[:, width:]
        rows = np.arange(blocks.shape[0], dtype=np.int64) * band
        flat_left = (left + rows[:, None]).ravel()
        flat_right = (right + rows[:, None]).ravel()
        # per element b of a right half: how many left-half values exceed it
        pos = np.searchsorted(flat_left, flat_right, side="right")
        le_counts = pos - np.repeat(np.arange(blocks.shape[0], dtype=np.int64) * width, width)
        real = (right != sentinel).ravel()
        inversions += int(np.sum((width - le_counts)[real]))
        arr = np.sort(blocks, axis=1).ravel()
        width *= 2
    return inversions


def _counts_mergesort(xs: np.ndarray, ys: np.ndarray) -> tuple[int, int]:
    """Concordant/discordant counts via sorting; O(n log n).

    Sort by (x, y); inversions of the y sequence are exactly the discordant
    pairs, and pairs untied in both margins split between the two classes.
    """
    n = len(xs)
    order = np.lexsort((ys, xs))
    y_sorted = ys[order]
    n_discordant = _merge_count(y_sorted)
    total = n * (n - 1) // 2
    ties_x = _tied_pairs(xs)
    ties_y = _tied_pairs(ys)
    joint = _tied_pairs(np.rec.fromarrays([xs, ys]))
    n_concordant = total - ties_x - ties_y + joint - n_discordant
    return n_concordant, n_discordant


def kendall(xs, ys, engine: str = "auto") -> RankReport:
    """Kendall rank correlation of two equal-length samples.

    Parameters
    ----------
    xs, ys : sequences of reals, length n >= 2
    engine : "auto", "quadratic" or "mergesort"

    Returns
    -------
    RankReport with rho (all-pairs denominator), rho_tilde (tie-corrected),
    and the underlying pair counts.

    Raises
    ------
    AlignmentError if lengths differ, ValidationError if n < 2, and
    DegenerateInputError when a margin is entirely tied (rho_tilde undefined).
    """
    xs = np.asarray(xs, dtype=float).ravel()
    ys = np.asarray(ys, dtype=float).ravel()
    if xs.shape != ys.shape:
        raise AlignmentError(f"length mismatch: {xs.shape[0]} vs {ys.shape[0]}")
    n = xs.shape[0]
    if n < 2:
        raise ValidationError("kendall needs at least two observations")
    if not (np.all(np.isfinite(xs)) and np.all(np.isfinite(ys))):
        raise ValidationError("kendall requires finite inputs")

    if engine == "auto":
        engine = "mergesort" if n > _MERGESORT_CUTOFF else "quadratic"
    if engine == "quadratic":
        n_c, n_d = _counts_quadratic(xs, ys)
    elif engine == "mergesort":
        n_c, n_d = _counts_mergesort(xs, ys)
    else:
        raise ValidationError(f"unknown engine {engine!r}")

    total = n * (n - 1) // 2
    ties_x = _tied_pairs(xs)
    ties_y = _tied_pairs(ys)
    rho = (n_c - n_d) / total
    denom_sq = (total - ties_x) * (total - ties_y)
    if denom_sq <= 0:
        raise DegenerateInputError("all values tied in one margin; rho_tilde undefined")
    rho_tilde = (n_c - n_d) / math.sqrt(denom_sq)
    return RankReport(
        rho=rho,
        rho_tilde=rho_tilde,
        n_concordant=n_c,
        n_discordant=n_d,
        ties_x=ties_x,
        ties_y=ties_y,
    )


def binned_kendall(z, xs, ys, bins: int = 10) -> list[RankReport]:
    """Kendall reports within equal-count bins of a conditioning variable.

    Approximates a conditional rank correlation by slicing on z (ties kept
    together by stable argsort); a diagnostic convention, not an estimator
    with guarantees. Bins too small to form a pair are skipped.
    """
    z = np.asarray(z, dtype=float).ravel()
    xs = np.asarray(xs, dtype=float).ravel()
    ys = np.asarray(ys, dtype=float).ravel()
    if not (z.shape == xs.shape == ys.shape):
        raise AlignmentError("z, xs, ys must be aligned")
    order = np.argsort(z, kind="stable")
    edges = np.linspace(0, len(z), bins + 1).astype(int)
    reports = []
    for lo, hi in zip(edges[:-1], edges[1:]):
        idx = order[lo:hi]
        if len(idx) < 2:
            continue
        reports.append(kendall(xs[idx], ys[idx]))
    return reports
