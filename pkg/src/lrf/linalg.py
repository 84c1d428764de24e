"""Dense linear-algebra primitives the compression engines build on.

Thin, validated wrappers around LAPACK via numpy: deterministic SVD with a
guaranteed descending spectrum, Cholesky with an explicit positive-definite
error, a thresholded pseudo-inverse applied to an existing factorization,
and the rank arithmetic that converts a parameter-compression ratio into a
factorization rank.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .exceptions import (
    AllSingular,
    ConvergenceFailure,
    NotPositiveDefinite,
    RatioOutOfRange,
)
from .validation import as_matrix, check_symmetric

__all__ = [
    "SvdResult",
    "RankBudget",
    "svd",
    "svdvals",
    "cholesky",
    "pseudo_inverse_factors",
    "rank_for_ratio",
    "default_pinv_rtol",
]


@dataclass(frozen=True)
class SvdResult:
    """Compact singular value decomposition ``u @ diag(sigma) @ vt``.

    ``u`` is (m, r), ``sigma`` is (r,) descending and nonnegative, ``vt`` is
    (r, n), with r = min(m, n).
    """

    u: np.ndarray
    sigma: np.ndarray
    vt: np.ndarray

    @property
    def rank_limit(self) -> int:
        return self.sigma.shape[0]

    def reconstruct(self, k: int | None = None) -> np.ndarray:
        """Dense matrix rebuilt from the leading ``k`` components."""
        if k is None:
            k = self.rank_limit
        return (self.u[:, :k] * self.sigma[:k]) @ self.vt[:k, :]


@dataclass(frozen=True)
class RankBudget:
    """Rank implied by a target parameter-compression ratio."""

    target_ratio: float
    resolved_rank: int
    dense_params: int
    factored_params: int


def svd(m) -> SvdResult:
    """Compact SVD of a dense matrix.

    Deterministic for identical input (divide-and-conquer LAPACK path).
    Raises ConvergenceFailure if the backend fails to converge.
    """
    a = as_matrix(m, "m")
    try:
        u, s, vt = np.linalg.svd(a, full_matrices=False)
    except np.linalg.LinAlgError as exc:
        raise ConvergenceFailure(f"SVD did not converge: {exc}") from exc
    return SvdResult(u=u, sigma=s, vt=vt)


def svdvals(m) -> np.ndarray:
    """Singular values only, descending."""
    a = as_matrix(m, "m")
    try:
        return np.linalg.svd(a, compute_uv=False)
    except np.linalg.LinAlgError as exc:
        raise ConvergenceFailure(f"SVD did not converge: {exc}") from exc


def cholesky(m) -> np.ndarray:
    """Lower-triangular Cholesky factor of a symmetric positive-definite matrix.

    The input must be symmetric within 1e-10 relative tolerance; it is
    exactly symmetrized before factorization. Raises NotPositiveDefinite
    when the factorization hits a pivot that is not strictly positive.
    """
    a = as_matrix(m, "m")
    sym = check_symmetric(a, "m")
    try:
        return np.linalg.cholesky(sym)
    except np.linalg.LinAlgError as exc:
        raise NotPositiveDefinite(f"matrix is not positive definite: {exc}") from exc


def default_pinv_rtol(dim: int) -> float:
    """Default relative cutoff for pseudo-inversion: dim * machine epsilon."""
    return dim * float(np.finfo(np.float64).eps)


def pseudo_inverse_factors(sr: SvdResult, tol_rel: float) -> np.ndarray:
    """Moore-Penrose pseudo-inverse assembled from an existing SVD.

    Inverts only singular values strictly above ``tol_rel * sigma_max``;
    the rest contribute zero. Raises AllSingular when sigma_max == 0, since
    the pseudo-inverse of the zero operator carries no information here.
    """
    sigma = sr.sigma
    if sigma.size == 0 or sigma[0] <= 0.0:
        raise AllSingular("all singular values are zero")
    cutoff = tol_rel * sigma[0]
    keep = sigma > cutoff
    inv = np.zeros_like(sigma)
    inv[keep] = 1.0 / sigma[keep]
    return (sr.vt.T * inv) @ sr.u.T


def rank_for_ratio(rows: int, cols: int, ratio: float) -> RankBudget:
    """Largest factorization rank whose two factors fit the parameter budget.

    A rank-k factorization of a (rows, cols) matrix stores k * (rows + cols)
    parameters; the budget is (1 - ratio) times the dense count. The rank is
    floored but never below 1, so very aggressive ratios on small matrices
    may exceed the nominal budget by construction.
    """
    r = float(ratio)
    if not math.isfinite(r) or r < 0.0 or r >= 1.0:
        raise RatioOutOfRange(f"ratio must lie in [0, 1), got {ratio!r}")
    if rows < 1 or cols < 1:
        raise ValueError(f"rows and cols must be positive, got {rows}x{cols}")
    dense = rows * cols
    rank = max(1, math.floor((1.0 - r) * dense / (rows + cols)))
    return RankBudget(
        target_ratio=r,
        resolved_rank=rank,
        dense_params=dense,
        factored_params=rank * (rows + cols),
    )
