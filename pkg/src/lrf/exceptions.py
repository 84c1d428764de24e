"""Exception and warning types shared across the package."""


class LrfError(Exception):
    """Base class for all package errors."""


class DimensionMismatch(LrfError):
    """Operands cannot be composed (incompatible shapes)."""


class InvalidRank(LrfError):
    """Requested rank is outside the valid range for the operands."""


class RatioOutOfRange(LrfError):
    """Compression ratio must lie in [0, 1)."""


class ConvergenceFailure(LrfError):
    """An iterative factorization failed to converge."""


class NotPositiveDefinite(LrfError):
    """Cholesky factorization hit a non-positive pivot."""


class AllSingular(LrfError):
    """Pseudo-inverse of an exactly zero operator was requested."""


class DegenerateGram(LrfError):
    """Gram matrix carries no signal (all singular values at zero)."""


class GramNotInvertible(LrfError):
    """Operation requires an invertible Gram and the input is not."""


class MissingGram(LrfError):
    """No Gram statistic available for a site that requires one."""


class InfeasibleBudget(LrfError):
    """Target ratio cannot be met inside the per-site ratio bounds."""


class ConfigError(LrfError):
    """Run configuration is missing, malformed, or inconsistent."""


class AllSitesFailed(LrfError):
    """Every site in a compression run failed to factorize."""


class ArtifactError(LrfError):
    """Base class for tensor-artifact I/O errors."""


class ManifestInvalid(ArtifactError):
    """Artifact manifest is malformed or internally inconsistent."""


class UnsupportedVersion(ArtifactError):
    """Artifact format version is not supported by this reader."""


class CorruptBlob(ArtifactError):
    """Tensor blob does not match the byte ranges the manifest declares."""


class NonFiniteTensor(ArtifactError):
    """A loaded tensor contains NaN or infinite entries."""


class NonMonotoneWarning(UserWarning):
    """Recorded when an iterative objective increases between iterations."""


class LineSearchWarning(UserWarning):
    """Recorded when a line search fails and the best-so-far point is kept."""
