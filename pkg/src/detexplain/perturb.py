"""Perturbation-based deletion explanations.

Given a target detection, the search greedily grows a set of superpixels
whose perturbation suppresses the target: at every iteration it adds the
candidate segment whose edit yields the lowest re-detected confidence
(ties prefer the smaller segment, then the lower id) and stops once the
matched confidence falls below ``tau`` or the iteration cap is reached.
Unmatched re-detections count as confidence zero. Minimality is the
perturbed area fraction, measured on the dilated pixel union actually
edited.

Four perturbation operators are available. ``noise`` blends the original
pixel with a seeded uniform field, ``pixel = (1 - level) * original +
level * u``; level 1 recovers full replacement. ``blur`` filters the
whole image once and composites inside the mask so mask borders show no
cropped-kernel artifacts. The mask fills use the per-channel image mean
(``mask_mean``) or exact black (``mask_black``).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .adapter.base import DetectorAdapter
from .core import (
    Box,
    Detection,
    box_pixel_mask,
    detection_from_json,
    detection_to_json,
    dilate_box,
    match_detection,
)
from .errors import AdapterError, DetexplainError, NoEligibleRegionError
from .segmentation import SegmentMap

OP_KINDS = ("mask_mean", "mask_black", "noise", "blur")

_EIGHT_CONNECTED = np.ones((3, 3), dtype=bool)


class SearchAborted(DetexplainError):
    """Detector failed mid-search; the partial result is preserved."""

    def __init__(self, message: str, partial: "PerturbationResult") -> None:
        super().__init__(message)
        self.partial = partial


@dataclass(frozen=True)
class PerturbationOp:
    kind: str
    blur_sigma: float = 5.0
    noise_level: float = 0.6
    mask_dilation_px: int = 2
    seed: int = 0

    def __post_init__(self) -> None:
        if self.kind not in OP_KINDS:
            raise ValueError(f"kind must be one of {OP_KINDS}, got {self.kind!r}")
        if self.blur_sigma <= 0:
            raise ValueError("blur_sigma must be > 0")
        if not (0.0 <= self.noise_level <= 1.0):
            raise ValueError("noise_level must be in [0, 1]")
        if self.mask_dilation_px < 0:
            raise ValueError("mask_dilation_px must be >= 0")

    def to_json(self) -> dict:
        return {
            "kind": self.kind,
            "blur_sigma": self.blur_sigma,
            "noise_level": self.noise_level,
            "mask_dilation_px": self.mask_dilation_px,
            "seed": self.seed,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "PerturbationOp":
        return cls(**obj)


@dataclass(frozen=True)
class SearchConfig:
    tau: float = 0.5
    delta: float = 0.2
    max_iterations: int = 80
    ring_fraction: float = 0.02
    min_ring_px: int = 2
    min_region_segments: int = 3

    def __post_init__(self) -> None:
        if not (0.0 < self.tau < 1.0):
            raise ValueError("tau must be in (0, 1)")
        if not (0.0 < self.delta < 1.0):
            raise ValueError("delta must be in (0, 1)")
        if self.max_iterations < 1:
            raise ValueError("max_iterations must be >= 1")

    def to_json(self) -> dict:
        return {
            "tau": self.tau,
            "delta": self.delta,
            "max_iterations": self.max_iterations,
            "ring_fraction": self.ring_fraction,
            "min_ring_px": self.min_ring_px,
            "min_region_segments": self.min_region_segments,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "SearchConfig":
        return cls(**obj)


@dataclass(frozen=True)
class PerturbationResult:
    """Search outcome; ``flipped`` means final confidence < tau, and
    ``zero_suppressed`` the stronger condition of exact disappearance."""

    target: Detection
    op: PerturbationOp
    config: "SearchConfig"
    selected_segments: tuple[int, ...]
    confidence_trace: tuple[float, ...]
    area_trace: tuple[float, ...]
    final_confidence: float
    flipped: bool
    zero_suppressed: bool
    area_fraction: float
    iterations: int

    def to_json(self) -> dict:
        return {
            "version": 1,
            "target": detection_to_json(self.target),
            "op": self.op.to_json(),
            "config": self.config.to_json(),
            "selected_segments": list(self.selected_segments),
            "confidence_trace": list(self.confidence_trace),
            "area_trace": list(self.area_trace),
            "final_confidence": self.final_confidence,
            "flipped": self.flipped,
            "zero_suppressed": self.zero_suppressed,
            "area_fraction": self.area_fraction,
            "iterations": self.iterations,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "PerturbationResult":
        return cls(
            target=detection_from_json(obj["target"]),
            op=PerturbationOp.from_json(obj["op"]),
            config=SearchConfig.from_json(obj["config"]),
            selected_segments=tuple(obj["selected_segments"]),
            confidence_trace=tuple(obj["confidence_trace"]),
            area_trace=tuple(obj["area_trace"]),
            final_confidence=float(obj["final_confidence"]),
            flipped=bool(obj["flipped"]),
            zero_suppressed=bool(obj["zero_suppressed"]),
            area_fraction=float(obj["area_fraction"]),
            iterations=int(obj["iterations"]),
        )


def ring_width(config: SearchConfig, height: int, width: int) -> int:
    """Dilation width of the fallback ring: a fraction of the smaller
    image side, never below the configured pixel floor."""
    return max(config.min_ring_px, round(config.ring_fraction * min(height, width)))


def eligible_region(
    segmap: SegmentMap, target_box: Box, config: SearchConfig
) -> list[int]:
    """Eligible segment ids intersecting the box, ring-expanded if scarce.

    Segments intersect by the pixel-center convention. When fewer than
    ``min_region_segments`` qualify, eligible segments under a thin
    dilated ring around the box are added. An empty region after
    expansion raises :class:`NoEligibleRegionError`.
    """
    height, width = segmap.labels.shape
    box_mask = box_pixel_mask(target_box, height, width)
    ids = {
        int(s) for s in np.unique(segmap.labels[box_mask]) if segmap.eligible[s]
    }
    if len(ids) < config.min_region_segments:
        grown = dilate_box(
            target_box, ring_width(config, height, width), width, height
        )
        ring_mask = box_pixel_mask(grown, height, width) & ~box_mask
        ids.update(
            int(s) for s in np.unique(segmap.labels[ring_mask]) if segmap.eligible[s]
        )
    if not ids:
        raise NoEligibleRegionError(
            f"no eligible segments intersect box {target_box.as_tuple()} or its ring"
        )
    return sorted(ids)


def perturbation_mask(
    segmap: SegmentMap, segments: list[int] | tuple[int, ...], dilation_px: int
) -> np.ndarray:
    """Dilated boolean union of the segments' pixels."""
    unknown = [s for s in segments if not (0 <= s < segmap.n)]
    if unknown:
        raise ValueError(f"unknown segment ids: {unknown}")
    mask = np.isin(segmap.labels, np.asarray(list(segments), dtype=np.int32))
    if dilation_px > 0:
        mask = ndimage.binary_dilation(
            mask, structure=_EIGHT_CONNECTED, iterations=dilation_px
        )
    return mask


def _op_apply(
    image: np.ndarray,
    mask: np.ndarray,
    op: PerturbationOp,
    blurred: np.ndarray | None = None,
    noise: np.ndarray | None = None,
) -> np.ndarray:
    out = image.copy()
    if op.kind == "mask_mean":
        out[mask] = image.mean(axis=(0, 1))
    elif op.kind == "mask_black":
        out[mask] = 0.0
    elif op.kind == "blur":
        if blurred is None:
            blurred = blur_whole_image(image, op.blur_sigma)
        out[mask] = blurred[mask]
    else:  # noise
        if noise is None:
            noise = noise_field(image.shape, op.seed)
        out[mask] = (1.0 - op.noise_level) * image[mask] + op.noise_level * noise[mask]
    return out


def blur_whole_image(image: np.ndarray, sigma: float) -> np.ndarray:
    return ndimage.gaussian_filter(image, sigma=(sigma, sigma, 0))


def noise_field(shape: tuple[int, ...], seed: int) -> np.ndarray:
    """Uniform [0, 1) field; a fixed function of seed and shape, so all
    candidate evaluations within one search see the same realization."""
    return np.random.default_rng(seed).random(shape)


def apply_perturbation(
    image: np.ndarray,
    segments: list[int] | tuple[int, ...],
    segmap: SegmentMap,
    op: PerturbationOp,
) -> np.ndarray:
    """Apply the operator inside the dilated union of the given segments."""
    img = np.asarray(image, dtype=np.float64)
    mask = perturbation_mask(segmap, segments, op.mask_dilation_px)
    return _op_apply(img, mask, op)


def greedy_deletion(
    adapter: DetectorAdapter,
    image: np.ndarray,
    target: Detection,
    op: PerturbationOp,
    segmap: SegmentMap,
    config: SearchConfig | None = None,
) -> PerturbationResult:
    """Greedy forward selection of segments that suppress the target."""
    config = config or SearchConfig()
    img = np.asarray(image, dtype=np.float64)
    height, width = img.shape[:2]

    if target.score < config.tau:  # already below threshold: nothing to delete
        return PerturbationResult(
            target=target,
            op=op,
            config=config,
            selected_segments=(),
            confidence_trace=(),
            area_trace=(),
            final_confidence=target.score,
            flipped=True,
            zero_suppressed=target.score == 0.0,
            area_fraction=0.0,
            iterations=0,
        )

    region = eligible_region(segmap, target.box, config)
    blurred = blur_whole_image(img, op.blur_sigma) if op.kind == "blur" else None
    noise = noise_field(img.shape, op.seed) if op.kind == "noise" else None
    # dilation distributes over union, so per-segment dilated masks compose
    seg_masks = {
        seg: perturbation_mask(segmap, [seg], op.mask_dilation_px) for seg in region
    }

    selected: list[int] = []
    base_mask = np.zeros((height, width), dtype=bool)
    confidence_trace: list[float] = []
    area_trace: list[float] = []
    confidence = target.score

    def build_result() -> PerturbationResult:
        final = confidence_trace[-1] if confidence_trace else target.score
        return PerturbationResult(
            target=target,
            op=op,
            config=config,
            selected_segments=tuple(selected),
            confidence_trace=tuple(confidence_trace),
            area_trace=tuple(area_trace),
            final_confidence=final,
            flipped=final < config.tau,
            zero_suppressed=final == 0.0,
            area_fraction=area_trace[-1] if area_trace else 0.0,
            iterations=len(selected),
        )

    for _ in range(config.max_iterations):
        candidates = [s for s in region if s not in selected]
        if not candidates:
            break
        best: tuple[float, int, int] | None = None  # (confidence, area, id)
        for seg in candidates:
            edited = _op_apply(img, base_mask | seg_masks[seg], op, blurred, noise)
            try:
                detections = adapter.detect([edited])[0]
            except AdapterError as exc:
                raise SearchAborted(
                    f"detector failed while evaluating segment {seg}: {exc}",
                    build_result(),
                ) from exc
            matched = match_detection(target, detections, config.delta)
            conf = matched.score if matched is not None else 0.0
            key = (conf, int(segmap.areas[seg]), seg)
            if best is None or key < best:
                best = key
        confidence, _, chosen = best
        selected.append(chosen)
        base_mask |= seg_masks[chosen]
        confidence_trace.append(confidence)
        area_trace.append(float(base_mask.sum()) / (height * width))
        if confidence < config.tau:
            break

    return build_result()
