"""Calibration data, toy models, and activation-statistics accumulation.

Calibration batches are matrices whose COLUMNS are samples, matching how
the per-site Gram (sum of x x^T over samples) is consumed downstream.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import erf

from .exceptions import DimensionMismatch, InvalidRank
from .validation import as_matrix

__all__ = [
    "MATRIX_TYPES",
    "ACTIVATIONS",
    "WeightSite",
    "ToyModel",
    "forward_capture",
    "GramAccumulator",
    "generate_calibration",
]

# Role labels for grouping sites; the math never depends on the label.
MATRIX_TYPES = ("Q", "K", "V", "O", "Gate", "Up", "Down", "Dense")


def _identity(z: np.ndarray) -> np.ndarray:
    return z


def _relu(z: np.ndarray) -> np.ndarray:
    return np.maximum(z, 0.0)


def _gelu(z: np.ndarray) -> np.ndarray:
    return 0.5 * z * (1.0 + erf(z / np.sqrt(2.0)))


ACTIVATIONS = {"identity": _identity, "relu": _relu, "gelu": _gelu}


@dataclass(frozen=True)
class WeightSite:
    """One dense weight matrix inside a model, tagged for grouping.

    ``weight`` has shape (out_dim, in_dim) and acts on column-sample input.
    """

    site_id: str
    layer_index: int
    matrix_type: str
    weight: np.ndarray

    def __post_init__(self):
        w = as_matrix(self.weight, f"weight[{self.site_id}]")
        object.__setattr__(self, "weight", w)
        if self.matrix_type not in MATRIX_TYPES:
            raise ValueError(
                f"matrix_type must be one of {MATRIX_TYPES}, got {self.matrix_type!r}"
            )
        if self.layer_index < 0:
            raise ValueError(f"layer_index must be >= 0, got {self.layer_index}")

    @property
    def out_dim(self) -> int:
        return self.weight.shape[0]

    @property
    def in_dim(self) -> int:
        return self.weight.shape[1]


@dataclass
class ToyModel:
    """A chain of weight sites with a pointwise nonlinearity in between.

    Sites apply in list order; the nonlinearity runs after every site except
    the last, which stays linear. Consecutive sites must compose.
    """

    sites: list = field(default_factory=list)
    activation: str = "relu"

    def __post_init__(self):
        if not self.sites:
            raise ValueError("model needs at least one site")
        if self.activation not in ACTIVATIONS:
            raise ValueError(
                f"activation must be one of {tuple(ACTIVATIONS)}, got {self.activation!r}"
            )
        seen = set()
        for s in self.sites:
            if s.site_id in seen:
                raise ValueError(f"duplicate site_id {s.site_id!r}")
            seen.add(s.site_id)
        for a, b in zip(self.sites, self.sites[1:]):
            if b.in_dim != a.out_dim:
                raise DimensionMismatch(
                    f"site {b.site_id!r} expects input dim {b.in_dim} but "
                    f"{a.site_id!r} produces {a.out_dim}"
                )

    @property
    def input_dim(self) -> int:
        return self.sites[0].in_dim

    @property
    def output_dim(self) -> int:
        return self.sites[-1].out_dim

    def forward(self, batch) -> np.ndarray:
        """Model output for a column-sample batch."""
        _, out = forward_capture(self, batch)
        return out


def forward_capture(model: ToyModel, batch):
    """Run the model and record the input each site actually saw.

    Returns ``(captures, output)`` where ``captures`` maps site_id to the
    (in_dim, n_samples) matrix that entered that site. These captured
    inputs, not the raw batch, are what Gram statistics accumulate.
    """
    x = as_matrix(batch, "batch")
    if x.shape[0] != model.input_dim:
        raise DimensionMismatch(
            f"batch has {x.shape[0]} rows but model expects {model.input_dim}"
        )
    act = ACTIVATIONS[model.activation]
    captures = {}
    last = len(model.sites) - 1
    for i, site in enumerate(model.sites):
        captures[site.site_id] = x
        z = site.weight @ x
        x = z if i == last else act(z)
    return captures, x


class GramAccumulator:
    """Streaming accumulator for the raw second-moment matrix of one site.

    Accumulates ``sum_j x_j x_j^T`` over column samples, re-symmetrizing
    after every update so rounding cannot drift the matrix off symmetric.
    The raw (unnormalized) sum is the canonical statistic; a per-sample
    normalized view is available for diagnostics.
    """

    def __init__(self, site_id: str, dim: int):
        if dim < 1:
            raise ValueError(f"dim must be positive, got {dim}")
        self.site_id = site_id
        self.dim = int(dim)
        self.gram = np.zeros((self.dim, self.dim), dtype=np.float64)
        self.sample_count = 0

    def update(self, batch) -> "GramAccumulator":
        """Fold a (dim, n_samples) batch into the statistic."""
        x = as_matrix(batch, "batch")
        if x.shape[0] != self.dim:
            raise DimensionMismatch(
                f"batch has {x.shape[0]} rows, accumulator expects {self.dim}"
            )
        g = self.gram + x @ x.T
        self.gram = (g + g.T) / 2.0
        self.sample_count += x.shape[1]
        return self

    def merge(self, other: "GramAccumulator") -> "GramAccumulator":
        """Fold another accumulator for the same site shape into this one."""
        if other.dim != self.dim:
            raise DimensionMismatch(
                f"cannot merge dim {other.dim} into dim {self.dim}"
            )
        g = self.gram + other.gram
        self.gram = (g + g.T) / 2.0
        self.sample_count += other.sample_count
        return self

    def matrix(self, normalized: bool = False) -> np.ndarray:
        """The accumulated Gram; divided by the sample count if requested."""
        if normalized and self.sample_count > 0:
            return self.gram / self.sample_count
        return self.gram.copy()

    def min_eigenvalue(self) -> float:
        """Smallest eigenvalue, for positive-semidefiniteness diagnostics."""
        return float(np.linalg.eigvalsh(self.gram)[0])


def generate_calibration(
    seed: int,
    n_samples: int,
    dim: int,
    distribution: str = "gaussian",
    rank: int | None = None,
) -> np.ndarray:
    """Synthesize a (dim, n_samples) calibration batch from an explicit seed.

    Distributions: ``gaussian`` (standard normal), ``heavy_tailed``
    (Student-t with 3 degrees of freedom), ``low_rank`` (columns confined to
    a random ``rank``-dimensional subspace, so the batch Gram is singular
    whenever rank < dim).
    """
    if n_samples < 1 or dim < 1:
        raise ValueError(f"need n_samples >= 1 and dim >= 1, got {n_samples}, {dim}")
    rng = np.random.default_rng(seed)
    if distribution == "gaussian":
        return rng.standard_normal((dim, n_samples))
    if distribution == "heavy_tailed":
        return rng.standard_t(3, size=(dim, n_samples))
    if distribution == "low_rank":
        if rank is None or int(rank) != rank or not (1 <= rank <= dim):
            raise InvalidRank(f"low_rank needs an integer rank in [1, {dim}], got {rank!r}")
        r = int(rank)
        basis, _ = np.linalg.qr(rng.standard_normal((dim, r)))
        coeffs = rng.standard_normal((r, n_samples))
        return basis @ coeffs
    raise ValueError(
        f"distribution must be one of ('gaussian', 'heavy_tailed', 'low_rank'), "
        f"got {distribution!r}"
    )
