"""Deterministic blob detector used as a test oracle and demo backend.

The rule: a connected dark region becomes a detection when its mean
luminance sits at least ``contrast_threshold`` below the surrounding
ring's, and the region looks like a coherent object rather than an
editing artifact. Two coherence checks guard the latter: regions darker
than ``black_floor`` (a hole, not an object) and regions whose mean
absolute neighbor-to-neighbor luminance difference exceeds
``roughness_max`` (noise, not structure) are rejected; smooth
large-scale gradients pass the roughness check, so moderately blurred
objects stay detectable. Score is ``clamp(contrast / max_contrast, 0,
1)``, rising linearly with contrast.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy import ndimage

from ..core import Box, Detection, DetectionSet, validate_image
from .base import DetectorAdapter, DetectorConfig

_EIGHT_CONNECTED = np.ones((3, 3), dtype=bool)


@dataclass(frozen=True)
class ToyDetectorParams:
    contrast_threshold: float = 0.15
    max_contrast: float = 0.5
    min_area: int = 30
    black_floor: float = 0.05
    roughness_max: float = 0.05
    surround_margin: int = 5

    def __post_init__(self) -> None:
        if self.contrast_threshold <= 0 or self.max_contrast <= 0:
            raise ValueError("contrast thresholds must be positive")
        if self.min_area < 1 or self.surround_margin < 1:
            raise ValueError("min_area and surround_margin must be >= 1")


def _roughness(lum: np.ndarray, mask: np.ndarray) -> float:
    """Mean absolute luminance step between 4-adjacent pixel pairs inside
    the mask; near zero for smooth regions, large for pixel noise."""
    diffs = []
    horizontal = mask[:, :-1] & mask[:, 1:]
    if horizontal.any():
        diffs.append(np.abs(lum[:, :-1] - lum[:, 1:])[horizontal])
    vertical = mask[:-1, :] & mask[1:, :]
    if vertical.any():
        diffs.append(np.abs(lum[:-1, :] - lum[1:, :])[vertical])
    if not diffs:
        return 0.0
    return float(np.concatenate(diffs).mean())


def toy_detect(
    image: np.ndarray, params: ToyDetectorParams | None = None, image_id: str = ""
) -> DetectionSet:
    """Apply the blob rule to one image; no score-threshold filtering."""
    params = params or ToyDetectorParams()
    img = validate_image(image)
    lum = img.mean(axis=2)
    background = float(np.median(lum))
    candidates = lum <= background - params.contrast_threshold / 2.0
    labels, count = ndimage.label(candidates, structure=_EIGHT_CONNECTED)

    detections = []
    for comp in range(1, count + 1):
        mask = labels == comp
        area = int(mask.sum())
        if area < params.min_area:
            continue
        region_mean = float(lum[mask].mean())
        ring = ndimage.binary_dilation(
            mask, structure=_EIGHT_CONNECTED, iterations=params.surround_margin
        ) & ~mask
        if not ring.any():
            continue
        contrast = float(lum[ring].mean()) - region_mean
        if contrast < params.contrast_threshold:
            continue
        if region_mean < params.black_floor:
            continue
        if _roughness(lum, mask) > params.roughness_max:
            continue
        rows, cols = np.nonzero(mask)
        box = Box(
            x_min=float(cols.min()),
            y_min=float(rows.min()),
            x_max=float(cols.max() + 1),
            y_max=float(rows.max() + 1),
        )
        score = float(np.clip(contrast / params.max_contrast, 0.0, 1.0))
        detections.append(Detection(box=box, class_id=0, score=score))
    return DetectionSet(detections=tuple(detections), image_id=image_id)


class ToyBlobDetector(DetectorAdapter):
    """Detect-only adapter around :func:`toy_detect`; pure and reentrant."""

    def __init__(
        self,
        config: DetectorConfig | None = None,
        params: ToyDetectorParams | None = None,
    ) -> None:
        super().__init__(config)
        self.params = params or ToyDetectorParams()

    def detect(self, images: Sequence[np.ndarray]) -> list[DetectionSet]:
        self._check_batch(images)
        out = []
        for image in images:
            dets = toy_detect(image, self.params)
            kept = tuple(
                d for d in dets if d.score >= self.config.score_threshold
            )
            out.append(DetectionSet(detections=kept, image_id=dets.image_id))
        return out
