"""Transition-point detection on a logits vector.

The sorted logits are mapped onto the unit square (rank i/N on x, min-max
scaled value on y) and compared with the falling diagonal r(x) = 1 - x.
The rank whose point lies furthest below the diagonal marks where the
informative head of the distribution gives way to the long tail.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import DiffArray, sort_descending_indices
from .errors import ContractError, DegenerateDistribution, NumericError

DEFAULT_K_CAP = 64
MIN_K = 2
# scores live in [-1, 1]; gaps this small are rounding, not signal
TIE_TOLERANCE = 1e-9


@dataclass(frozen=True)
class NormalizedCurve:
    x: np.ndarray
    y: np.ndarray
    d: np.ndarray


@dataclass(frozen=True)
class KneeResult:
    k: int
    sorted_indices: np.ndarray

    @property
    def top(self) -> np.ndarray:
        """Vocabulary positions of the selected head, strongest first."""
        return self.sorted_indices[: self.k]

    def __eq__(self, other) -> bool:
        if not isinstance(other, KneeResult):
            return NotImplemented
        return self.k == other.k and np.array_equal(self.sorted_indices, other.sorted_indices)

    __hash__ = None  # type: ignore[assignment]


def normalize_sorted(z_sorted) -> NormalizedCurve:
    z = np.asarray(z_sorted, dtype=np.float64)
    n = z.size
    if z.ndim != 1 or n < 2:
        raise ContractError("need a vector of at least two values")
    if np.any(np.diff(z) > 0):
        raise ContractError("input must be sorted non-increasing")
    z_max, z_min = z[0], z[-1]
    if z_max == z_min:
        raise DegenerateDistribution("constant logits have no transition point")
    x = np.arange(1, n + 1, dtype=np.float64) / n
    y = (z - z_min) / (z_max - z_min)
    return NormalizedCurve(x=x, y=y, d=(1.0 - x) - y)


def knee_index(z, k_cap: int = DEFAULT_K_CAP) -> KneeResult:
    """Return the cutoff rank ``k`` (1-based count of head entries) for ``z``.

    ``k`` is clamped to ``[2, min(N, k_cap)]``. Constant input falls back to
    ``k = 2`` over the natural index order.
    """
    v = z.data if isinstance(z, DiffArray) else np.asarray(z, dtype=np.float64)
    if v.ndim != 1 or v.size < 2:
        raise ContractError("knee detection needs a vector of length >= 2")
    if k_cap < MIN_K:
        raise ContractError(f"k_cap must be at least {MIN_K}")
    if not np.isfinite(v).all():
        raise NumericError("logits contain non-finite values")
    order = sort_descending_indices(v)
    try:
        curve = normalize_sorted(v[order])
    except DegenerateDistribution:
        return KneeResult(k=MIN_K, sorted_indices=np.arange(v.size))
    # smallest rank among scores tied with the maximum up to rounding
    k = int(np.flatnonzero(curve.d >= curve.d.max() - TIE_TOLERANCE)[0]) + 1
    k = max(MIN_K, min(k, v.size, k_cap))
    return KneeResult(k=k, sorted_indices=order)
