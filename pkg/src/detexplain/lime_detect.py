"""LIME adapted to multi-instance object detection.

The black box being approximated is the detector-aware score

    f(x') = sum_i w_i * s'_i

where the sum runs over the reference detections of the unperturbed
image, ``w_i`` are instance weights (confidence, area, or uniform mode)
and ``s'_i`` is the score of the detection in the perturbed image that
matches reference instance i by class and IoU (zero when unmatched).

Perturbed samples keep or drop eligible superpixels; a ridge-regularized
weighted linear model over the keep indicators approximates f locally.
Sample weights use the cosine distance to the all-ones (unperturbed) row:
``exp(-d^2 / kernel_width^2)``.

Explanation maps paint ``max(beta_i, 0) * prox_i`` uniformly over each
eligible segment and min-max normalize. ``prox_i`` is 1 for segments
touching a detection box and decays as a Gaussian of the centroid's gap
to the nearest box otherwise, suppressing distant background relevance.
Negative coefficients are clipped in the map but kept, signed, in the
JSON report.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .adapter.base import DetectorAdapter
from .core import (
    Box,
    DetectionSet,
    box_pixel_mask,
    match_detection,
    minmax_normalize,
)
from .errors import NoDetectionsError, SingularFitError
from .segmentation import SegmentMap

WEIGHT_MODES = ("confidence", "area", "uniform")


@dataclass(frozen=True)
class LimeParams:
    """Sampling, kernel, and fit hyperparameters.

    ``kernel_width=None`` resolves to ``0.25 * sqrt(n_eligible)`` at fit
    time. ``fill="mean"`` replaces dropped segments with the per-channel
    image mean; an explicit RGB triple is also accepted.
    """

    n_samples: int = 1000
    keep_probability: float = 0.5
    kernel_width: float | None = None
    ridge_strength: float = 1e-3
    fill: str | tuple[float, float, float] = "mean"
    iou_match_threshold: float = 0.5
    weight_mode: str = "confidence"
    proximity_scale: float = 0.05
    seed: int = 0

    def __post_init__(self) -> None:
        if not (0.0 < self.keep_probability < 1.0):
            raise ValueError("keep_probability must be in (0, 1)")
        if self.n_samples < 2:
            raise ValueError("n_samples must be >= 2")
        if self.ridge_strength < 0:
            raise ValueError("ridge_strength must be >= 0")
        if self.weight_mode not in WEIGHT_MODES:
            raise ValueError(f"weight_mode must be one of {WEIGHT_MODES}")
        if self.proximity_scale <= 0:
            raise ValueError("proximity_scale must be > 0")


@dataclass(frozen=True)
class InstanceWeights:
    """Normalized per-detection weights; non-negative, summing to 1."""

    mode: str
    weights: np.ndarray

    def __post_init__(self) -> None:
        w = np.asarray(self.weights, dtype=np.float64)
        if w.ndim != 1 or len(w) == 0:
            raise ValueError("weights must be a non-empty vector")
        if (w < 0).any() or not np.isclose(w.sum(), 1.0):
            raise ValueError("weights must be non-negative and sum to 1")
        object.__setattr__(self, "weights", w)


@dataclass(frozen=True)
class Surrogate:
    """Fitted local linear model over segment keep indicators."""

    intercept: float
    coefficients: np.ndarray
    r_squared: float
    sample_weights: np.ndarray


def instance_weights(detections: DetectionSet, mode: str) -> InstanceWeights:
    """Confidence, area, or uniform weights over the reference detections."""
    if mode not in WEIGHT_MODES:
        raise ValueError(f"mode must be one of {WEIGHT_MODES}, got {mode!r}")
    if len(detections) == 0:
        raise NoDetectionsError("instance weights need at least one detection")
    if mode == "uniform":
        w = np.full(len(detections), 1.0 / len(detections))
    elif mode == "confidence":
        scores = np.array([d.score for d in detections])
        if scores.sum() <= 0:
            raise ValueError("confidence mode needs a positive score total")
        w = scores / scores.sum()
    else:
        areas = np.array([d.box.area for d in detections])
        w = areas / areas.sum()
    return InstanceWeights(mode=mode, weights=w)


def sample_matrix(
    n_eligible: int, params: LimeParams, rng: np.random.Generator
) -> np.ndarray:
    """Binary (n_samples, n_eligible) keep matrix; row 0 all ones.

    Every row keeps at least one segment; a row drawn all-zero gets one
    uniformly chosen segment switched back on.
    """
    if n_eligible < 1:
        raise ValueError("need at least one eligible segment")
    if params.n_samples < n_eligible + 1:
        raise ValueError(
            f"n_samples={params.n_samples} must be >= n_eligible+1={n_eligible + 1}"
        )
    z = (rng.random((params.n_samples, n_eligible)) < params.keep_probability)
    z = z.astype(np.float64)
    z[0, :] = 1.0
    empty = np.flatnonzero(z.sum(axis=1) == 0)
    for row in empty:
        z[row, rng.integers(0, n_eligible)] = 1.0
    return z


def resolve_fill(
    image: np.ndarray, fill: str | tuple[float, float, float]
) -> np.ndarray:
    if isinstance(fill, str):
        if fill != "mean":
            raise ValueError(f"unknown fill {fill!r}; use 'mean' or an RGB triple")
        return np.asarray(image, dtype=np.float64).mean(axis=(0, 1))
    rgb = np.asarray(fill, dtype=np.float64)
    if rgb.shape != (3,):
        raise ValueError("fill triple must have 3 channels")
    return rgb


def mask_sample(
    image: np.ndarray,
    segmap: SegmentMap,
    row: np.ndarray,
    fill: np.ndarray,
) -> np.ndarray:
    """Replace dropped eligible segments with the fill color.

    ``row`` follows the eligible-column order (ascending segment id);
    ineligible segments are never touched.
    """
    eligible_ids = segmap.eligible_ids()
    if len(row) != len(eligible_ids):
        raise ValueError(
            f"row length {len(row)} != eligible segment count {len(eligible_ids)}"
        )
    dropped = eligible_ids[np.asarray(row) == 0]
    if len(dropped) == 0:
        return np.asarray(image, dtype=np.float64).copy()
    out = np.asarray(image, dtype=np.float64).copy()
    mask = np.isin(segmap.labels, dropped)
    out[mask] = fill
    return out


def score_sample(
    reference: DetectionSet,
    perturbed: DetectionSet,
    weights: InstanceWeights,
    iou_match_threshold: float,
) -> float:
    """Weighted matched-score response f(x') in [0, 1]."""
    return float(
        weights.weights @ instance_scores(reference, perturbed, iou_match_threshold)
    )


def instance_scores(
    reference: DetectionSet, perturbed: DetectionSet, iou_match_threshold: float
) -> np.ndarray:
    """Per-reference-instance matched scores (0 where unmatched)."""
    scores = np.zeros(len(reference))
    for i, ref in enumerate(reference):
        matched = match_detection(ref, perturbed, iou_match_threshold)
        if matched is not None:
            scores[i] = matched.score
    return scores


def _kernel_weights(z: np.ndarray, kernel_width: float) -> np.ndarray:
    ones = np.ones(z.shape[1])
    norm = np.sqrt((z**2).sum(axis=1)) * np.sqrt(float(z.shape[1]))
    cosine = np.divide(z @ ones, norm, out=np.zeros(len(z)), where=norm > 0)
    distance = 1.0 - cosine
    return np.exp(-(distance**2) / kernel_width**2)


def fit_surrogate(
    z: np.ndarray, responses: np.ndarray, params: LimeParams
) -> Surrogate:
    """Ridge-regularized weighted least squares over [1, Z].

    The intercept is not penalized. With zero ridge a rank-deficient
    design raises :class:`SingularFitError` instead of silently returning
    a minimum-norm solution.
    """
    z = np.asarray(z, dtype=np.float64)
    y = np.asarray(responses, dtype=np.float64)
    if z.ndim != 2 or len(z) != len(y):
        raise ValueError("Z and responses must have matching rows")
    if not np.isfinite(y).all():
        raise ValueError("responses must be finite")
    n_samples, n_features = z.shape
    kernel_width = (
        params.kernel_width
        if params.kernel_width is not None
        else 0.25 * np.sqrt(n_features)
    )
    sw = _kernel_weights(z, kernel_width)
    design = np.concatenate([np.ones((n_samples, 1)), z], axis=1)
    sqrt_w = np.sqrt(sw)
    lhs = design * sqrt_w[:, None]
    rhs = y * sqrt_w
    if params.ridge_strength > 0:
        penalty = np.zeros((n_features, n_features + 1))
        penalty[:, 1:] = np.sqrt(params.ridge_strength) * np.eye(n_features)
        lhs = np.concatenate([lhs, penalty])
        rhs = np.concatenate([rhs, np.zeros(n_features)])
    elif np.linalg.matrix_rank(lhs) < n_features + 1:
        raise SingularFitError(
            "design matrix is rank deficient; set ridge_strength > 0"
        )
    beta, *_ = np.linalg.lstsq(lhs, rhs, rcond=None)
    fitted = design @ beta
    mean = np.average(y, weights=sw)
    ss_total = float(np.sum(sw * (y - mean) ** 2))
    ss_resid = float(np.sum(sw * (y - fitted) ** 2))
    r_squared = 1.0 - ss_resid / ss_total if ss_total > 0 else 1.0
    return Surrogate(
        intercept=float(beta[0]),
        coefficients=beta[1:],
        r_squared=r_squared,
        sample_weights=sw,
    )


def segment_proximity(
    segmap: SegmentMap, boxes: Sequence[Box], proximity_scale: float
) -> np.ndarray:
    """Per-segment proximity factor in (0, 1].

    1 when the segment intersects any box (pixel-center convention);
    otherwise a Gaussian of the centroid's distance to the nearest box
    with sigma = proximity_scale * image diagonal.
    """
    height, width = segmap.labels.shape
    sigma = proximity_scale * float(np.hypot(height, width))
    prox = np.zeros(segmap.n)
    inside = np.zeros(segmap.n, dtype=bool)
    for box in boxes:
        mask = box_pixel_mask(box, height, width)
        inside[np.unique(segmap.labels[mask])] = True

    rows, cols = np.mgrid[0:height, 0:width]
    flat = segmap.labels.ravel()
    cy = np.bincount(flat, weights=(rows + 0.5).ravel(), minlength=segmap.n)
    cx = np.bincount(flat, weights=(cols + 0.5).ravel(), minlength=segmap.n)
    cy /= segmap.areas
    cx /= segmap.areas

    for seg in range(segmap.n):
        if inside[seg]:
            prox[seg] = 1.0
            continue
        gap = min(_point_box_gap(cx[seg], cy[seg], box) for box in boxes)
        prox[seg] = float(np.exp(-(gap**2) / (2.0 * sigma**2)))
    return prox


def _point_box_gap(x: float, y: float, box: Box) -> float:
    dx = max(box.x_min - x, 0.0, x - box.x_max)
    dy = max(box.y_min - y, 0.0, y - box.y_max)
    return float(np.hypot(dx, dy))


def build_explanation_map(
    surrogate: Surrogate,
    segmap: SegmentMap,
    detections: DetectionSet,
    proximity_scale: float = 0.05,
) -> np.ndarray:
    """Paint clipped, proximity-weighted coefficients over segments."""
    if len(detections) == 0:
        raise NoDetectionsError("explanation map needs at least one detection")
    eligible_ids = segmap.eligible_ids()
    if len(surrogate.coefficients) != len(eligible_ids):
        raise ValueError("surrogate does not match this segment map")
    prox = segment_proximity(
        segmap, [d.box for d in detections], proximity_scale
    )
    values = np.zeros(segmap.n)
    values[eligible_ids] = np.maximum(surrogate.coefficients, 0.0) * prox[eligible_ids]
    return minmax_normalize(values[segmap.labels])


@dataclass(frozen=True)
class LimeExplanation:
    """Everything produced for one image: map, fit, and per-segment table."""

    attribution: np.ndarray
    surrogate: Surrogate
    weights: InstanceWeights
    eligible_ids: np.ndarray
    proximity: np.ndarray
    params: LimeParams
    reference: DetectionSet
    instance_maps: tuple[np.ndarray, ...] = field(default=())

    def to_json(self) -> dict:
        betas = dict(zip(self.eligible_ids.tolist(), self.surrogate.coefficients))
        segments = []
        for seg_id in self.eligible_ids.tolist():
            beta = float(betas[seg_id])
            proximity = float(self.proximity[seg_id])
            segments.append(
                {
                    "id": seg_id,
                    "beta": beta,
                    "proximity": proximity,
                    "final_value": max(beta, 0.0) * proximity,
                }
            )
        return {
            "version": 1,
            "weight_mode": self.weights.mode,
            "instance_weights": self.weights.weights.tolist(),
            "intercept": self.surrogate.intercept,
            "r_squared": self.surrogate.r_squared,
            "segments": segments,
            "params": {
                "n_samples": self.params.n_samples,
                "keep_probability": self.params.keep_probability,
                "kernel_width": self.params.kernel_width,
                "ridge_strength": self.params.ridge_strength,
                "fill": list(self.params.fill)
                if not isinstance(self.params.fill, str)
                else self.params.fill,
                "iou_match_threshold": self.params.iou_match_threshold,
                "weight_mode": self.params.weight_mode,
                "proximity_scale": self.params.proximity_scale,
                "seed": self.params.seed,
            },
        }


def explain_image(
    adapter: DetectorAdapter,
    image: np.ndarray,
    segmap: SegmentMap,
    params: LimeParams,
    reference: DetectionSet | None = None,
    with_instance_maps: bool = False,
) -> LimeExplanation:
    """Full LIME pipeline for one image.

    Samples are scored through the adapter in ``batch_limit`` chunks; the
    result is byte-deterministic for a fixed seed regardless of batching.
    When ``with_instance_maps`` is set, a per-detection surrogate is also
    fitted from the per-instance responses (same samples, weights
    concentrated on one instance) to support per-box metrics.
    """
    image = np.asarray(image, dtype=np.float64)
    if reference is None:
        reference = adapter.detect([image])[0]
    if len(reference) == 0:
        raise NoDetectionsError("LIME needs at least one reference detection")
    weights = instance_weights(reference, params.weight_mode)
    eligible_ids = segmap.eligible_ids()
    if len(eligible_ids) == 0:
        raise NoDetectionsError("no eligible segments to perturb")

    rng = np.random.default_rng(params.seed)
    z = sample_matrix(len(eligible_ids), params, rng)
    fill = resolve_fill(image, params.fill)

    per_instance = np.zeros((len(z), len(reference)))
    per_instance[0] = instance_scores(reference, reference, params.iou_match_threshold)
    pending = list(range(1, len(z)))
    for start in range(0, len(pending), adapter.config.batch_limit):
        chunk = pending[start : start + adapter.config.batch_limit]
        images = [mask_sample(image, segmap, z[row], fill) for row in chunk]
        for row, detset in zip(chunk, adapter.detect(images)):
            per_instance[row] = instance_scores(
                reference, detset, params.iou_match_threshold
            )

    responses = per_instance @ weights.weights
    surrogate = fit_surrogate(z, responses, params)
    attribution = build_explanation_map(
        surrogate, segmap, reference, params.proximity_scale
    )
    proximity = segment_proximity(
        segmap, [d.box for d in reference], params.proximity_scale
    )

    instance_maps: tuple[np.ndarray, ...] = ()
    if with_instance_maps:
        maps = []
        for i, det in enumerate(reference):
            inst_surrogate = fit_surrogate(z, per_instance[:, i], params)
            maps.append(
                build_explanation_map(
                    inst_surrogate,
                    segmap,
                    DetectionSet(detections=(det,)),
                    params.proximity_scale,
                )
            )
        instance_maps = tuple(maps)

    return LimeExplanation(
        attribution=attribution,
        surrogate=surrogate,
        weights=weights,
        eligible_ids=eligible_ids,
        proximity=proximity,
        params=params,
        reference=reference,
        instance_maps=instance_maps,
    )
