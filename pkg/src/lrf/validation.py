"""Input validation helpers.

Every public entry point funnels its array arguments through these so that
shape and finiteness errors surface at the boundary with a usable message
instead of deep inside a factorization.
"""

from __future__ import annotations

import numpy as np

from .exceptions import DimensionMismatch, InvalidRank, RatioOutOfRange

__all__ = [
    "as_matrix",
    "check_composable",
    "check_square",
    "check_symmetric",
    "check_rank",
    "check_ratio",
]

# Relative entrywise tolerance for treating a matrix as symmetric.
SYMMETRY_RTOL = 1e-10


def as_matrix(a, name: str = "array") -> np.ndarray:
    """Coerce ``a`` to a 2-D float64 array with finite entries.

    Returns a C-contiguous float64 view or copy. Raises DimensionMismatch
    for non-2-D input and ValueError for NaN or infinite entries.
    """
    m = np.asarray(a, dtype=np.float64)
    if m.ndim != 2:
        raise DimensionMismatch(f"{name} must be 2-D, got ndim={m.ndim}")
    if m.size and not np.all(np.isfinite(m)):
        raise ValueError(f"{name} contains non-finite entries")
    return np.ascontiguousarray(m)


def check_composable(a: np.ndarray, b: np.ndarray, names=("left", "right")) -> None:
    """Require ``a @ b`` to be defined."""
    if a.shape[1] != b.shape[0]:
        raise DimensionMismatch(
            f"{names[0]} has {a.shape[1]} columns but {names[1]} has "
            f"{b.shape[0]} rows"
        )


def check_square(m: np.ndarray, name: str = "matrix") -> None:
    if m.shape[0] != m.shape[1]:
        raise DimensionMismatch(f"{name} must be square, got {m.shape}")


def check_symmetric(m: np.ndarray, name: str = "matrix", rtol: float = SYMMETRY_RTOL) -> np.ndarray:
    """Require ``m`` symmetric within ``rtol`` (relative to its largest entry).

    Returns the exactly symmetrized matrix (m + m.T) / 2.
    """
    check_square(m, name)
    if m.size == 0:
        return m
    scale = np.max(np.abs(m))
    asym = np.max(np.abs(m - m.T))
    if asym > rtol * max(scale, np.finfo(np.float64).tiny):
        raise DimensionMismatch(
            f"{name} is not symmetric: max asymmetry {asym:.3e} exceeds "
            f"{rtol:.1e} relative"
        )
    return (m + m.T) / 2.0


def check_rank(k, limit: int, name: str = "rank") -> int:
    """Require an integer rank with 1 <= k <= limit."""
    ki = int(k)
    if ki != k or ki < 1 or ki > limit:
        raise InvalidRank(f"{name} must be an integer in [1, {limit}], got {k!r}")
    return ki


def check_ratio(ratio, name: str = "ratio") -> float:
    """Require a compression ratio in [0, 1)."""
    r = float(ratio)
    if not np.isfinite(r) or r < 0.0 or r >= 1.0:
        raise RatioOutOfRange(f"{name} must lie in [0, 1), got {ratio!r}")
    return r
