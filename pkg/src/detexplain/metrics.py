"""Localization-fidelity and faithfulness metrics plus test-set aggregation.

Localization fidelity: the attribution ratio is the fraction of pixels at
or above the attribution threshold that fall inside ground-truth boxes,
and the max-saliency hit asks whether the argmax pixel (first in
row-major order on ties) lies inside a labeled box.

Faithfulness over perturbation records: the flip rate is the fraction of
targets whose post-edit confidence fell below tau, the confidence drop
is the mean of (original - post-edit) confidence, and the conditional
drop restricts that mean to the unflipped records.

Aggregates report sample standard deviations (N-1 denominator); a single
sample reports SD 0 with a flag.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .core import AnnotationBox, Detection, boxes_pixel_mask
from .errors import MetricsError


@dataclass(frozen=True)
class FidelityParams:
    """``attribution_threshold`` selects the mid-to-high attribution level set."""

    attribution_threshold: float = 0.5

    def __post_init__(self) -> None:
        if not (0.0 < self.attribution_threshold < 1.0):
            raise ValueError("attribution_threshold must be in (0, 1)")


@dataclass(frozen=True)
class FaithfulnessRecord:
    """One (image, target, operator) perturbation outcome."""

    image_id: str
    target: Detection
    op_kind: str
    original_confidence: float
    final_confidence: float
    area_fraction: float
    segment_count: int

    def __post_init__(self) -> None:
        for value in (self.original_confidence, self.final_confidence):
            if not (0.0 <= value <= 1.0):
                raise ValueError(f"confidence {value} outside [0, 1]")


@dataclass(frozen=True)
class FidelityRecord:
    """Per-image localization outcomes for one explanation method.

    ``attribution_ratio`` is None when no pixel reaches the threshold
    (undefined denominator, excluded from aggregates); ``image_hit`` is
    None when the image has no ground-truth boxes.
    """

    image_id: str
    method: str
    attribution_ratio: float | None
    image_hit: bool | None
    boxes_hit: int
    boxes_total: int


def attribution_ratio(
    attribution: np.ndarray, gt: list[AnnotationBox], threshold: float
) -> float | None:
    """Fraction of at-threshold pixels inside any ground-truth box.

    Returns None when no pixel reaches the threshold; raises on empty
    ground truth (fidelity is undefined without labels).
    """
    if not gt:
        raise MetricsError("attribution ratio needs at least one ground-truth box")
    arr = np.asarray(attribution, dtype=np.float64)
    if arr.min() < 0.0 or arr.max() > 1.0:
        raise ValueError("attribution map must be normalized to [0, 1]")
    level = arr >= threshold
    total = int(level.sum())
    if total == 0:
        return None
    height, width = arr.shape
    inside = boxes_pixel_mask([a.box for a in gt], height, width)
    return float((level & inside).sum()) / total


def max_saliency_hit(attribution: np.ndarray, gt: list[AnnotationBox]) -> bool:
    """Does the argmax pixel's center land inside a labeled box?"""
    if not gt:
        raise MetricsError("max-saliency hit needs at least one ground-truth box")
    arr = np.asarray(attribution, dtype=np.float64)
    row, col = np.unravel_index(int(np.argmax(arr)), arr.shape)
    x, y = col + 0.5, row + 0.5
    return any(a.box.contains_point(x, y) for a in gt)


def flip_rate(records: list[FaithfulnessRecord], tau: float) -> float:
    """FR_p: fraction of records with post-edit confidence below tau."""
    if not records:
        raise MetricsError("flip rate needs at least one record")
    flips = sum(1 for r in records if r.final_confidence < tau)
    return flips / len(records)


def confidence_drop(
    records: list[FaithfulnessRecord], tau: float
) -> tuple[float, float | None, int]:
    """(mean drop, mean drop over unflipped records or None, |unflipped|)."""
    if not records:
        raise MetricsError("confidence drop needs at least one record")
    drops = [r.original_confidence - r.final_confidence for r in records]
    unflipped = [
        r.original_confidence - r.final_confidence
        for r in records
        if r.final_confidence >= tau
    ]
    mean_all = float(np.mean(drops))
    mean_unflipped = float(np.mean(unflipped)) if unflipped else None
    return mean_all, mean_unflipped, len(unflipped)


def _mean_sd(values: list[float]) -> tuple[float, float, bool]:
    """Mean and sample SD; a single value reports SD 0 with a flag."""
    if len(values) == 1:
        return float(values[0]), 0.0, True
    return float(np.mean(values)), float(np.std(values, ddof=1)), False


@dataclass(frozen=True)
class MetricsReport:
    """Aggregated metrics with the exact config echoed alongside."""

    localization: dict
    faithfulness: dict
    config: dict

    def to_json(self) -> dict:
        return {
            "version": 1,
            "config": self.config,
            "localization": self.localization,
            "faithfulness": self.faithfulness,
        }


def aggregate_report(
    fidelity: list[FidelityRecord],
    faithfulness: list[FaithfulnessRecord],
    config: dict,
    tau: float = 0.5,
) -> MetricsReport:
    """Fold per-image records into the per-method / per-op report."""
    localization: dict[str, dict] = {}
    for method in sorted({r.method for r in fidelity}):
        rows = [r for r in fidelity if r.method == method]
        ratios = [r.attribution_ratio for r in rows if r.attribution_ratio is not None]
        entry: dict = {"n": len(rows), "n_missing": len(rows) - len(ratios)}
        if ratios:
            mean, sd, single = _mean_sd(ratios)
            entry.update(
                attribution_ratio_mean=mean,
                attribution_ratio_sd=sd,
                attribution_ratio_single_sample=single,
            )
        else:
            entry.update(
                attribution_ratio_mean=None,
                attribution_ratio_sd=None,
                attribution_ratio_single_sample=False,
            )
        boxes_total = sum(r.boxes_total for r in rows)
        boxes_hit = sum(r.boxes_hit for r in rows)
        images_scored = [r for r in rows if r.image_hit is not None]
        image_hits = sum(1 for r in images_scored if r.image_hit)
        entry["hit_rate_boxes"] = {
            "hits": boxes_hit,
            "total": boxes_total,
            "rate": boxes_hit / boxes_total if boxes_total else None,
        }
        entry["hit_rate_images"] = {
            "hits": image_hits,
            "total": len(images_scored),
            "rate": image_hits / len(images_scored) if images_scored else None,
        }
        localization[method] = entry

    faith: dict[str, dict] = {}
    for op_kind in sorted({r.op_kind for r in faithfulness}):
        rows = [r for r in faithfulness if r.op_kind == op_kind]
        fr = flip_rate(rows, tau)
        cd, cd_unflipped, n_unflipped = confidence_drop(rows, tau)
        flipped_rows = [r for r in rows if r.final_confidence < tau]
        entry = {
            "n": len(rows),
            "flip_rate": fr,
            "confidence_drop_mean": cd,
            "confidence_drop_unflipped": cd_unflipped,
            "n_unflipped": n_unflipped,
            "flipped_count": len(flipped_rows),
            "zero_suppressed_count": sum(
                1 for r in rows if r.final_confidence == 0.0
            ),
        }
        if flipped_rows:
            seg_mean, seg_sd, _ = _mean_sd([float(r.segment_count) for r in flipped_rows])
            area_mean, area_sd, _ = _mean_sd([r.area_fraction for r in flipped_rows])
            entry.update(
                flipped_segments_mean=seg_mean,
                flipped_segments_sd=seg_sd,
                flipped_area_fraction_mean=area_mean,
                flipped_area_fraction_sd=area_sd,
            )
        else:
            entry.update(
                flipped_segments_mean=None,
                flipped_segments_sd=None,
                flipped_area_fraction_mean=None,
                flipped_area_fraction_sd=None,
            )
        faith[op_kind] = entry

    return MetricsReport(localization=localization, faithfulness=faith, config=config)


def write_csv(
    out_dir: str | Path,
    fidelity: list[FidelityRecord],
    faithfulness: list[FaithfulnessRecord],
) -> tuple[Path, Path]:
    """Per-image rows for external analysis; returns the two file paths."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    fidelity_path = out / "fidelity.csv"
    with fidelity_path.open("w", newline="") as handle:
        writer = csv.writer(handle)
        writer.writerow(
            ["image_id", "method", "attribution_ratio", "image_hit", "boxes_hit", "boxes_total"]
        )
        for r in sorted(fidelity, key=lambda r: (r.image_id, r.method)):
            writer.writerow(
                [
                    r.image_id,
                    r.method,
                    "" if r.attribution_ratio is None else repr(r.attribution_ratio),
                    "" if r.image_hit is None else int(r.image_hit),
                    r.boxes_hit,
                    r.boxes_total,
                ]
            )
    faithfulness_path = out / "faithfulness.csv"
    with faithfulness_path.open("w", newline="") as handle:
        writer = csv.writer(handle)
        writer.writerow(
            [
                "image_id",
                "op",
                "original_confidence",
                "final_confidence",
                "area_fraction",
                "segment_count",
            ]
        )
        for r in sorted(faithfulness, key=lambda r: (r.image_id, r.op_kind)):
            writer.writerow(
                [
                    r.image_id,
                    r.op_kind,
                    repr(r.original_confidence),
                    repr(r.final_confidence),
                    repr(r.area_fraction),
                    r.segment_count,
                ]
            )
    return fidelity_path, faithfulness_path
