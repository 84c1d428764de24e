"""Activation-aware low-rank compression of dense weight matrices.

Compresses weight matrices into factor pairs while minimizing the error of
the layer's OUTPUT on calibration data, allocates heterogeneous
compression budgets across sites, and ships the whole thing as a library,
an sklearn-style estimator, and a CLI pipeline.
"""

from .allocation import CompressionPlan, SitePlan, allocate, homogeneous_plan, score_sites
from .calibration import (
    GramAccumulator,
    ToyModel,
    WeightSite,
    forward_capture,
    generate_calibration,
)
from .engines import (
    AdmmNoiseResult,
    CholeskyOutcome,
    EngineOutcome,
    LowRankFactors,
    RefineResult,
    activation_loss,
    gradient_check,
    gram_loss,
    nuclear_norm,
    refine_lbfgs,
    run_engine,
    theoretical_min_loss,
    truncate_admm_noise,
    truncate_cholesky,
    truncate_double_svd,
    truncate_plain,
    whitened_spectrum,
)
from .estimator import ActivationAwareCompressor
from .linalg import RankBudget, SvdResult, cholesky, pseudo_inverse_factors, rank_for_ratio, svd
from .model_io import (
    ArtifactManifest,
    TensorRecord,
    densify,
    load_artifact,
    save_artifact,
)
from .pipeline import DEFAULT_CONFIG, RunConfig

__version__ = "0.1.0"

__all__ = [
    "ActivationAwareCompressor",
    "AdmmNoiseResult",
    "ArtifactManifest",
    "CholeskyOutcome",
    "CompressionPlan",
    "DEFAULT_CONFIG",
    "EngineOutcome",
    "GramAccumulator",
    "LowRankFactors",
    "RankBudget",
    "RefineResult",
    "RunConfig",
    "SitePlan",
    "SvdResult",
    "TensorRecord",
    "ToyModel",
    "WeightSite",
    "activation_loss",
    "allocate",
    "cholesky",
    "densify",
    "forward_capture",
    "generate_calibration",
    "gradient_check",
    "gram_loss",
    "homogeneous_plan",
    "load_artifact",
    "nuclear_norm",
    "pseudo_inverse_factors",
    "rank_for_ratio",
    "refine_lbfgs",
    "run_engine",
    "save_artifact",
    "score_sites",
    "svd",
    "theoretical_min_loss",
    "truncate_admm_noise",
    "truncate_cholesky",
    "truncate_double_svd",
    "truncate_plain",
    "whitened_spectrum",
    "__version__",
]
