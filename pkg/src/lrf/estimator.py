"""scikit-learn style estimator facade over the truncation engines.

``fit``/``partial_fit`` consume calibration batches in the sklearn
orientation (samples in rows) and accumulate the activation Gram;
``compress`` and ``transform`` then factor weight matrices against that
statistic. The estimator holds no weights itself: it is a fitted statistic
plus engine configuration, so one fitted instance compresses any number of
weight matrices that share the same input dimension.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_array, check_is_fitted

from .engines import ENGINES, EngineOutcome, LowRankFactors, gram_loss, run_engine
from .exceptions import DimensionMismatch, NotPositiveDefinite
from .linalg import rank_for_ratio
from .validation import as_matrix, check_ratio

__all__ = ["ActivationAwareCompressor"]


class ActivationAwareCompressor(BaseEstimator):
    """Compress weight matrices against fitted activation statistics.

    Parameters
    ----------
    ratio : float, default=0.2
        Parameter-compression ratio in [0, 1); resolves to a rank per
        weight shape. Ignored when ``rank`` is set.
    rank : int or None, default=None
        Explicit factorization rank overriding ``ratio``.
    engine : str, default="double_svd"
        One of "plain", "cholesky", "double_svd", "admm_noise".
    jitter : float, default=1e-6
        Diagonal bump (relative to the mean diagonal) for the single
        whitening-baseline retry when the Gram is not positive definite.
    noise_eps : float, default=1e-3
        Perturbation budget for the "admm_noise" engine.
    admm_rho : float, default=1.0
        ADMM penalty parameter.
    admm_max_iter : int, default=50
        ADMM iteration cap.
    refine : bool, default=False
        Polish engine output with the quasi-Newton refinement stage.
    refine_lr : float, default=0.01
        Trial step of the refinement's first line search.
    refine_max_iter : int, default=40
        Refinement iteration cap.
    pinv_rtol : float or None, default=None
        Relative pseudo-inverse cutoff; None means dim * machine epsilon.

    Attributes
    ----------
    gram_ : ndarray of shape (n_features, n_features)
        Accumulated second-moment matrix of the calibration samples.
    n_samples_ : int
        Number of samples folded into ``gram_``.
    n_features_in_ : int
        Input dimension the statistic was fitted for.

    Examples
    --------
    >>> import numpy as np
    >>> rng = np.random.default_rng(0)
    >>> comp = ActivationAwareCompressor(ratio=0.5)
    >>> comp = comp.fit(rng.standard_normal((256, 16)))
    >>> w_hat = comp.transform(rng.standard_normal((8, 16)))
    >>> w_hat.shape
    (8, 16)
    """

    def __init__(
        self,
        ratio: float = 0.2,
        rank: int | None = None,
        engine: str = "double_svd",
        jitter: float = 1e-6,
        noise_eps: float = 1e-3,
        admm_rho: float = 1.0,
        admm_max_iter: int = 50,
        refine: bool = False,
        refine_lr: float = 0.01,
        refine_max_iter: int = 40,
        pinv_rtol: float | None = None,
    ):
        self.ratio = ratio
        self.rank = rank
        self.engine = engine
        self.jitter = jitter
        self.noise_eps = noise_eps
        self.admm_rho = admm_rho
        self.admm_max_iter = admm_max_iter
        self.refine = refine
        self.refine_lr = refine_lr
        self.refine_max_iter = refine_max_iter
        self.pinv_rtol = pinv_rtol

    def fit(self, X, y=None):
        """Reset the statistic and accumulate one batch of samples (rows)."""
        X = check_array(X, dtype=np.float64)
        self.n_features_in_ = X.shape[1]
        self.gram_ = np.zeros((X.shape[1], X.shape[1]), dtype=np.float64)
        self.n_samples_ = 0
        return self._accumulate(X)

    def partial_fit(self, X, y=None):
        """Accumulate an additional batch into the fitted statistic."""
        X = check_array(X, dtype=np.float64)
        if not hasattr(self, "gram_"):
            return self.fit(X)
        if X.shape[1] != self.n_features_in_:
            raise DimensionMismatch(
                f"batch has {X.shape[1]} features, statistic was fitted with "
                f"{self.n_features_in_}"
            )
        return self._accumulate(X)

    def _accumulate(self, X):
        g = self.gram_ + X.T @ X
        self.gram_ = (g + g.T) / 2.0
        self.n_samples_ += X.shape[0]
        return self

    def _resolve_rank(self, w: np.ndarray) -> int:
        if self.rank is not None:
            return int(self.rank)
        check_ratio(self.ratio, "ratio")
        return rank_for_ratio(w.shape[0], w.shape[1], self.ratio).resolved_rank

    def compress_outcome(self, W) -> EngineOutcome:
        """Full engine outcome (factors plus traces) for one weight matrix."""
        check_is_fitted(self, "gram_")
        if self.engine not in ENGINES:
            raise ValueError(f"engine must be one of {ENGINES}, got {self.engine!r}")
        w = as_matrix(W, "W")
        if w.shape[1] != self.n_features_in_:
            raise DimensionMismatch(
                f"weight has {w.shape[1]} columns, statistic was fitted with "
                f"{self.n_features_in_}"
            )
        return run_engine(
            w,
            self.gram_,
            self._resolve_rank(w),
            self.engine,
            jitter=self.jitter,
            noise_eps=self.noise_eps,
            admm_rho=self.admm_rho,
            admm_max_iter=self.admm_max_iter,
            refine=self.refine,
            refine_lr=self.refine_lr,
            refine_max_iter=self.refine_max_iter,
            pinv_rtol=self.pinv_rtol,
        )

    def compress(self, W) -> LowRankFactors:
        """Factor one weight matrix; raises if the engine cannot produce one."""
        outcome = self.compress_outcome(W)
        if outcome.factors is None:
            raise NotPositiveDefinite(outcome.detail)
        return outcome.factors

    def transform(self, W) -> np.ndarray:
        """Low-rank reconstruction of a weight matrix, same shape as input."""
        return self.compress(W).densify()

    def truncation_loss(self, W, factors: LowRankFactors | None = None) -> float:
        """Output-space loss of (given or freshly computed) factors for W."""
        check_is_fitted(self, "gram_")
        if factors is None:
            factors = self.compress(W)
        return gram_loss(W, factors, self.gram_)
