"""Geometric and image primitives shared by every other module.

Conventions used throughout the toolkit:

* Boxes are axis-aligned with floating-point corner coordinates
  ``(x_min, y_min, x_max, y_max)``, origin at the top-left of the image,
  x growing rightwards and y growing downwards.
* Pixel ``(row i, col j)`` has its center at ``(x, y) = (j + 0.5, i + 0.5)``.
  A pixel belongs to a box when its center falls inside the half-open
  rectangle ``[x_min, x_max) x [y_min, y_max)``, so adjacent boxes
  partition pixels without double counting.
* Images are ``float64`` arrays of shape ``(H, W, 3)`` with values in
  ``[0, 1]`` (RGB); attribution maps are ``(H, W)`` arrays in ``[0, 1]``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class Box:
    """Axis-aligned box in pixel coordinates, sub-pixel corners allowed."""

    x_min: float
    y_min: float
    x_max: float
    y_max: float

    def __post_init__(self) -> None:
        for name in ("x_min", "y_min", "x_max", "y_max"):
            object.__setattr__(self, name, float(getattr(self, name)))
        coords = (self.x_min, self.y_min, self.x_max, self.y_max)
        if not all(math.isfinite(c) for c in coords):
            raise ValueError(f"box coordinates must be finite, got {coords}")
        if not (self.x_min < self.x_max and self.y_min < self.y_max):
            raise ValueError(f"degenerate box: {coords}")

    @property
    def width(self) -> float:
        return self.x_max - self.x_min

    @property
    def height(self) -> float:
        return self.y_max - self.y_min

    @property
    def area(self) -> float:
        return self.width * self.height

    def contains_point(self, x: float, y: float) -> bool:
        """Half-open membership test (see module docstring)."""
        return self.x_min <= x < self.x_max and self.y_min <= y < self.y_max

    def as_tuple(self) -> tuple[float, float, float, float]:
        return (self.x_min, self.y_min, self.x_max, self.y_max)


@dataclass(frozen=True)
class Detection:
    """One predicted instance: box, integer class label, confidence."""

    box: Box
    class_id: int
    score: float

    def __post_init__(self) -> None:
        object.__setattr__(self, "class_id", int(self.class_id))
        object.__setattr__(self, "score", float(self.score))
        if not (0.0 <= self.score <= 1.0):
            raise ValueError(f"score must be in [0, 1], got {self.score}")


@dataclass(frozen=True)
class AnnotationBox:
    """One ground-truth box with its integer class label."""

    box: Box
    class_id: int


@dataclass(frozen=True)
class DetectionSet:
    """Detections for one image in canonical order.

    The order is descending score with ties broken by ``x_min`` then
    ``y_min`` of the box, so downstream matching is reproducible no matter
    how the backend emitted its detections.
    """

    detections: tuple[Detection, ...]
    image_id: str = ""

    def __post_init__(self) -> None:
        ordered = tuple(
            sorted(
                self.detections,
                key=lambda d: (-d.score, d.box.x_min, d.box.y_min),
            )
        )
        object.__setattr__(self, "detections", ordered)

    def __len__(self) -> int:
        return len(self.detections)

    def __iter__(self):
        return iter(self.detections)


def validate_image(image: np.ndarray) -> np.ndarray:
    """Check the (H, W, 3) float RGB contract and return a float64 view."""
    arr = np.asarray(image, dtype=np.float64)
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise ValueError(f"expected (H, W, 3) image, got shape {arr.shape}")
    if arr.shape[0] < 1 or arr.shape[1] < 1:
        raise ValueError(f"image must be at least 1x1, got shape {arr.shape}")
    if not np.isfinite(arr).all():
        raise ValueError("image contains non-finite values")
    if arr.min() < 0.0 or arr.max() > 1.0:
        raise ValueError("image values must lie in [0, 1]")
    return arr


def iou(a: Box, b: Box) -> float:
    """Intersection over union of two boxes; 0.0 when disjoint."""
    ix = min(a.x_max, b.x_max) - max(a.x_min, b.x_min)
    iy = min(a.y_max, b.y_max) - max(a.y_min, b.y_min)
    if ix <= 0.0 or iy <= 0.0:
        return 0.0
    inter = ix * iy
    union = a.area + b.area - inter
    return inter / union


def match_detection(
    target: Detection, candidates: DetectionSet, delta: float
) -> Detection | None:
    """Best same-class candidate with IoU strictly above ``delta``.

    Ties on IoU prefer the higher score, then the earlier candidate in the
    set's canonical order. Returns ``None`` when nothing qualifies.
    """
    if not (0.0 < delta < 1.0):
        raise ValueError(f"delta must be in (0, 1), got {delta}")
    best: Detection | None = None
    best_key: tuple[float, float, int] | None = None
    for index, cand in enumerate(candidates):
        if cand.class_id != target.class_id:
            continue
        overlap = iou(target.box, cand.box)
        if overlap <= delta:
            continue
        key = (overlap, cand.score, -index)
        if best_key is None or key > best_key:
            best, best_key = cand, key
    return best


def minmax_normalize(raw: np.ndarray) -> np.ndarray:
    """Rescale to [0, 1] via (v - min) / (max - min).

    A constant input (no variation, hence no evidence) maps to all zeros.
    """
    arr = np.asarray(raw, dtype=np.float64)
    if not np.isfinite(arr).all():
        raise ValueError("attribution values must be finite")
    lo = arr.min()
    hi = arr.max()
    if hi == lo:
        return np.zeros_like(arr)
    return (arr - lo) / (hi - lo)


def dilate_box(b: Box, pixels: int, width: float, height: float) -> Box:
    """Grow a box by ``pixels`` on every side, clamped to image bounds."""
    if pixels < 0:
        raise ValueError(f"dilation must be non-negative, got {pixels}")
    return Box(
        x_min=max(0.0, b.x_min - pixels),
        y_min=max(0.0, b.y_min - pixels),
        x_max=min(float(width), b.x_max + pixels),
        y_max=min(float(height), b.y_max + pixels),
    )


def box_pixel_mask(b: Box, height: int, width: int) -> np.ndarray:
    """Boolean (H, W) mask of pixels whose centers fall inside the box."""
    cols = np.arange(width) + 0.5
    rows = np.arange(height) + 0.5
    in_x = (cols >= b.x_min) & (cols < b.x_max)
    in_y = (rows >= b.y_min) & (rows < b.y_max)
    return in_y[:, None] & in_x[None, :]


def boxes_pixel_mask(boxes: list[Box], height: int, width: int) -> np.ndarray:
    """Union of :func:`box_pixel_mask` over several boxes."""
    mask = np.zeros((height, width), dtype=bool)
    for b in boxes:
        mask |= box_pixel_mask(b, height, width)
    return mask


def box_to_list(b: Box) -> list[float]:
    return [b.x_min, b.y_min, b.x_max, b.y_max]


def box_from_list(values: list[float]) -> Box:
    if len(values) != 4:
        raise ValueError(f"box list must have 4 entries, got {values!r}")
    return Box(*map(float, values))


def detection_to_json(det: Detection) -> dict:
    return {
        "box": box_to_list(det.box),
        "class": det.class_id,
        "score": det.score,
    }


def detection_from_json(obj: dict) -> Detection:
    return Detection(
        box=box_from_list(obj["box"]),
        class_id=int(obj["class"]),
        score=float(obj["score"]),
    )


def detection_set_to_json(dets: DetectionSet) -> dict:
    return {
        "image_id": dets.image_id,
        "detections": [detection_to_json(d) for d in dets],
    }


def detection_set_from_json(obj: dict) -> DetectionSet:
    return DetectionSet(
        detections=tuple(detection_from_json(d) for d in obj["detections"]),
        image_id=str(obj.get("image_id", "")),
    )
