"""Heterogeneous compression-ratio allocation across weight sites.

Sites are grouped by their matrix type; within each group the shared
parameter budget (group size times the target ratio) is split in
proportion to how cheaply each site compresses. The per-site signal is the
loss floor at the rank the uniform target would imply: sites whose floor
is small can absorb more compression, sites with a large floor are spared.
Ratios are clamped to a configurable band and the freed budget is
redistributed inside the group, so every group's mean ratio equals the
target exactly.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .engines import tail_loss_from_sigma, whitened_spectrum
from .exceptions import DimensionMismatch, InfeasibleBudget, MissingGram
from .linalg import rank_for_ratio
from .validation import check_ratio

__all__ = [
    "SCORE_FLOOR",
    "SitePlan",
    "CompressionPlan",
    "score_sites",
    "allocate",
    "homogeneous_plan",
]

# Scores are fed through 1/log; anything at or below exp(0.1) is clamped so
# the transform stays positive and bounded by 10.
SCORE_FLOOR = math.exp(0.1)

PLAN_FORMAT_VERSION = "1"


@dataclass(frozen=True)
class SitePlan:
    """Allocation decision for one site."""

    site_id: str
    matrix_type: str
    rows: int
    cols: int
    score: float | None
    allocated_ratio: float
    resolved_rank: int

    def params_dense(self) -> int:
        return self.rows * self.cols

    def params_factored(self) -> int:
        return self.resolved_rank * (self.rows + self.cols)

    def to_dict(self) -> dict:
        return {
            "site_id": self.site_id,
            "matrix_type": self.matrix_type,
            "rows": self.rows,
            "cols": self.cols,
            "score": self.score,
            "allocated_ratio": self.allocated_ratio,
            "resolved_rank": self.resolved_rank,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SitePlan":
        return cls(
            site_id=d["site_id"],
            matrix_type=d["matrix_type"],
            rows=int(d["rows"]),
            cols=int(d["cols"]),
            score=None if d["score"] is None else float(d["score"]),
            allocated_ratio=float(d["allocated_ratio"]),
            resolved_rank=int(d["resolved_rank"]),
        )


@dataclass
class CompressionPlan:
    """Per-site ratios and ranks for one compression run."""

    target_ratio: float
    allocation: str  # "heterogeneous" | "homogeneous"
    entries: list = field(default_factory=list)

    def __post_init__(self):
        self.entries = sorted(self.entries, key=lambda e: e.site_id)

    def entry_for(self, site_id: str) -> SitePlan:
        for e in self.entries:
            if e.site_id == site_id:
                return e
        raise KeyError(f"no plan entry for site {site_id!r}")

    def group_mean_ratios(self) -> dict:
        groups: dict = {}
        for e in self.entries:
            groups.setdefault(e.matrix_type, []).append(e.allocated_ratio)
        return {t: float(np.mean(rs)) for t, rs in groups.items()}

    def to_dict(self) -> dict:
        return {
            "format_version": PLAN_FORMAT_VERSION,
            "kind": "plan",
            "target_ratio": self.target_ratio,
            "allocation": self.allocation,
            "entries": [e.to_dict() for e in self.entries],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "CompressionPlan":
        if d.get("format_version") != PLAN_FORMAT_VERSION or d.get("kind") != "plan":
            raise ValueError("not a plan document")
        return cls(
            target_ratio=float(d["target_ratio"]),
            allocation=str(d["allocation"]),
            entries=[SitePlan.from_dict(e) for e in d["entries"]],
        )


def score_sites(sites, grams: dict, target_ratio: float, pinv_rtol=None) -> dict:
    """Loss floor per site at the rank a uniform target ratio would give.

    ``grams`` maps site_id to that site's activation Gram. The floor needs
    only the Gram: it is the tail energy of the whitened weight's spectrum
    past the implied rank.
    """
    ratio = check_ratio(target_ratio, "target_ratio")
    scores = {}
    for site in sites:
        gram = grams.get(site.site_id)
        if gram is None:
            raise MissingGram(f"no gram for site {site.site_id!r}")
        if gram.shape != (site.in_dim, site.in_dim):
            raise DimensionMismatch(
                f"gram for {site.site_id!r} has shape {gram.shape}, "
                f"expected ({site.in_dim}, {site.in_dim})"
            )
        k = rank_for_ratio(site.out_dim, site.in_dim, ratio).resolved_rank
        spectrum = whitened_spectrum(site.weight, gram, pinv_rtol)
        scores[site.site_id] = tail_loss_from_sigma(spectrum, k)
    return scores


def _bounded_shares(weights: np.ndarray, mean_target: float, lo: float, hi: float) -> np.ndarray:
    """Split n*mean_target proportionally to weights, each share in [lo, hi].

    The solution is clip(lam * w_i, lo, hi) for the scalar lam that makes
    the sum come out to n*mean_target; that sum is continuous and
    nondecreasing in lam, so the scalar is found by bisection and then
    re-solved exactly on the active (unclamped) set. The result preserves
    the group total and is monotone in the weights.
    """
    n = weights.shape[0]
    if np.all(weights == weights[0]):
        # Symmetric group: the split is the target itself, exactly.
        return np.full(n, mean_target)
    if mean_target == lo or mean_target == hi:
        return np.full(n, mean_target)
    total = n * mean_target
    lam_lo, lam_hi = 0.0, hi / float(np.min(weights))
    for _ in range(200):
        lam = 0.5 * (lam_lo + lam_hi)
        if float(np.sum(np.clip(lam * weights, lo, hi))) < total:
            lam_lo = lam
        else:
            lam_hi = lam
    lam = 0.5 * (lam_lo + lam_hi)
    raw = lam * weights
    interior = (raw > lo) & (raw < hi)
    if interior.any():
        pinned_sum = lo * float(np.sum(raw <= lo)) + hi * float(np.sum(raw >= hi))
        lam = (total - pinned_sum) / float(np.sum(weights[interior]))
    return np.clip(lam * weights, lo, hi)


def allocate(
    sites,
    scores: dict,
    target_ratio: float,
    ratio_floor: float = 0.02,
    ratio_ceiling: float = 0.98,
) -> CompressionPlan:
    """Per-site compression ratios whose group means equal the target.

    Within each matrix-type group, shares are proportional to 1/log(score)
    (scores clamped at SCORE_FLOOR so the transform stays positive), then
    clamped to [ratio_floor, ratio_ceiling] with in-group redistribution.
    A target outside the clamp band is infeasible by construction.
    """
    ratio = check_ratio(target_ratio, "target_ratio")
    if not (0.0 <= ratio_floor <= ratio_ceiling <= 1.0):
        raise ValueError(
            f"need 0 <= ratio_floor <= ratio_ceiling <= 1, got "
            f"{ratio_floor}, {ratio_ceiling}"
        )
    if ratio < ratio_floor or ratio > ratio_ceiling:
        raise InfeasibleBudget(
            f"target ratio {ratio} lies outside the clamp band "
            f"[{ratio_floor}, {ratio_ceiling}]"
        )
    groups: dict = {}
    for site in sites:
        if site.site_id not in scores:
            raise MissingGram(f"no score for site {site.site_id!r}")
        groups.setdefault(site.matrix_type, []).append(site)

    entries = []
    for mtype in sorted(groups):
        members = sorted(groups[mtype], key=lambda s: s.site_id)
        raw_scores = np.array([scores[s.site_id] for s in members], dtype=np.float64)
        weights = 1.0 / np.log(np.maximum(raw_scores, SCORE_FLOOR))
        shares = _bounded_shares(weights, ratio, ratio_floor, ratio_ceiling)
        for site, score, share in zip(members, raw_scores, shares):
            if share >= 1.0:
                raise InfeasibleBudget(
                    f"site {site.site_id!r} would need ratio {share} >= 1"
                )
            rank = rank_for_ratio(site.out_dim, site.in_dim, share).resolved_rank
            entries.append(
                SitePlan(
                    site_id=site.site_id,
                    matrix_type=site.matrix_type,
                    rows=site.out_dim,
                    cols=site.in_dim,
                    score=float(score),
                    allocated_ratio=float(share),
                    resolved_rank=rank,
                )
            )
    return CompressionPlan(target_ratio=ratio, allocation="heterogeneous", entries=entries)


def homogeneous_plan(sites, target_ratio: float, scores: dict | None = None) -> CompressionPlan:
    """Uniform plan: every site gets the target ratio unchanged."""
    ratio = check_ratio(target_ratio, "target_ratio")
    entries = []
    for site in sites:
        rank = rank_for_ratio(site.out_dim, site.in_dim, ratio).resolved_rank
        entries.append(
            SitePlan(
                site_id=site.site_id,
                matrix_type=site.matrix_type,
                rows=site.out_dim,
                cols=site.in_dim,
                score=float(scores[site.site_id]) if scores else None,
                allocated_ratio=ratio,
                resolved_rank=rank,
            )
        )
    return CompressionPlan(target_ratio=ratio, allocation="homogeneous", entries=entries)
