"""Region refinement: pick a product-centred crop from detector proposals.

Proposal affinities are turned into a probability over boxes with a
temperature softmax; the best box is cropped only when its probability
clears a confidence threshold, otherwise the whole image is kept.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .core import BoundingBoxProposal
from .errors import DegenerateBox, EmptyProposalSet, NonFiniteAffinity


@dataclass(frozen=True)
class GroundingConfig:
    tau_dino: float = 1.0
    tau_thresh: float = 0.35

    def __post_init__(self) -> None:
        if not self.tau_dino > 0:
            raise ValueError(f"tau_dino must be positive, got {self.tau_dino}")
        if not 0.0 <= self.tau_thresh <= 1.0:
            raise ValueError(f"tau_thresh must lie in [0, 1], got {self.tau_thresh}")


class RegionKind(str, enum.Enum):
    CROP = "CROP"
    FULL_IMAGE = "FULL_IMAGE"


@dataclass(frozen=True)
class RegionDecision:
    kind: RegionKind
    box: BoundingBoxProposal | None = None
    winning_score: float | None = None
    winning_index: int | None = None


FULL_IMAGE = RegionDecision(RegionKind.FULL_IMAGE)


def normalize_scores(
    proposals: Sequence[BoundingBoxProposal], config: GroundingConfig
) -> list[BoundingBoxProposal]:
    if not proposals:
        raise EmptyProposalSet("cannot normalize an empty proposal set")
    logits = np.array([p.affinity for p in proposals], dtype=np.float64)
    if not np.all(np.isfinite(logits)):
        raise NonFiniteAffinity(f"non-finite affinity in {logits.tolist()}")
    logits = logits / config.tau_dino
    logits -= logits.max()
    weights = np.exp(logits)
    scores = weights / weights.sum()
    return [p.with_score(min(1.0, float(s))) for p, s in zip(proposals, scores)]


def select_region(
    proposals: Sequence[BoundingBoxProposal], config: GroundingConfig
) -> RegionDecision:
    if not proposals:
        return FULL_IMAGE
    scored = normalize_scores(proposals, config)
    # softmax is monotone, so the raw affinity picks the same winner without
    # rounding ties; max() keeps the first maximal element (lowest index)
    best = max(range(len(scored)), key=lambda i: scored[i].affinity)
    s_best = scored[best].score
    if s_best >= config.tau_thresh:
        return RegionDecision(RegionKind.CROP, scored[best], s_best, best)
    return RegionDecision(RegionKind.FULL_IMAGE, None, s_best, best)


def _round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def crop_image(image: np.ndarray, box: BoundingBoxProposal) -> np.ndarray:
    """Copy the box's rectangle out of an H x W (x C) raster.

    Sizes round half-up and are clamped to at least one pixel; the origin is
    shifted inward when rounding would run past the right/bottom edge.
    """
    if image.ndim < 2 or image.shape[0] == 0 or image.shape[1] == 0:
        raise DegenerateBox(f"cannot crop an empty raster of shape {image.shape}")
    height, width = image.shape[:2]
    cw = min(width, max(1, _round_half_up(box.w * width)))
    ch = min(height, max(1, _round_half_up(box.h * height)))
    x0 = min(_round_half_up(box.x * width), width - cw)
    y0 = min(_round_half_up(box.y * height), height - ch)
    if cw <= 0 or ch <= 0:
        raise DegenerateBox(f"box {box} collapses to zero area on a {width}x{height} raster")
    return image[y0 : y0 + ch, x0 : x0 + cw].copy()


def apply_decision(image: np.ndarray, decision: RegionDecision) -> np.ndarray:
    if decision.kind is RegionKind.CROP:
        assert decision.box is not None
        return crop_image(image, decision.box)
    return image
