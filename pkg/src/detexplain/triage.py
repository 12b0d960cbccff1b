"""False-positive triage: isolate, attach evidence, emit a reviewable report.

Detections are matched one-to-one to ground truth greedily by descending
IoU (same class, IoU at or above the threshold); whatever detection ends
up unmatched is a false positive. The one-to-one constraint deliberately
surfaces duplicate detections of a single object as false positives.

Categorization is human-in-the-loop: the report ships with every entry
``unreviewed`` and survives an edit-reload-emit cycle byte-stably, with
category counts recomputed from the entries on every emit.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

from .core import (
    AnnotationBox,
    Detection,
    DetectionSet,
    detection_from_json,
    detection_to_json,
    iou,
)

CATEGORIES = (
    "missed_annotation",
    "dark_edge_shape",
    "dark_open_water",
    "merged_detection",
    "black_ice",
    "other",
    "unreviewed",
)


@dataclass(frozen=True)
class FalsePositive:
    """An unmatched detection plus pointers to its explanation artifacts.

    ``best_gt_iou`` is the best overlap against ground-truth boxes still
    available under one-to-one matching, so it is always strictly below
    the matching threshold.
    """

    image_id: str
    detection: Detection
    best_gt_iou: float
    explanation_refs: dict = field(default_factory=dict)
    category: str = "unreviewed"

    def __post_init__(self) -> None:
        if self.category not in CATEGORIES:
            raise ValueError(f"category must be one of {CATEGORIES}")

    def to_json(self) -> dict:
        return {
            "image_id": self.image_id,
            "detection": detection_to_json(self.detection),
            "best_gt_iou": self.best_gt_iou,
            "explanation_refs": dict(sorted(self.explanation_refs.items())),
            "category": self.category,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "FalsePositive":
        return cls(
            image_id=str(obj["image_id"]),
            detection=detection_from_json(obj["detection"]),
            best_gt_iou=float(obj["best_gt_iou"]),
            explanation_refs=dict(obj.get("explanation_refs", {})),
            category=str(obj.get("category", "unreviewed")),
        )


def find_false_positives(
    detections: DetectionSet,
    gt: list[AnnotationBox],
    iou_threshold: float = 0.5,
    score_threshold: float = 0.5,
) -> list[FalsePositive]:
    """Confident detections left unmatched by greedy one-to-one matching."""
    if not (0.0 < iou_threshold < 1.0) or not (0.0 < score_threshold < 1.0):
        raise ValueError("thresholds must lie in (0, 1)")
    confident = [d for d in detections if d.score >= score_threshold]

    pairs = []
    for det_idx, det in enumerate(confident):
        for gt_idx, ann in enumerate(gt):
            if ann.class_id != det.class_id:
                continue
            overlap = iou(det.box, ann.box)
            if overlap >= iou_threshold:
                pairs.append((overlap, det_idx, gt_idx))
    pairs.sort(key=lambda p: (-p[0], p[1], p[2]))

    matched_det: set[int] = set()
    matched_gt: set[int] = set()
    for overlap, det_idx, gt_idx in pairs:
        if det_idx in matched_det or gt_idx in matched_gt:
            continue
        matched_det.add(det_idx)
        matched_gt.add(gt_idx)

    out = []
    for det_idx, det in enumerate(confident):
        if det_idx in matched_det:
            continue
        available = [
            iou(det.box, ann.box)
            for gt_idx, ann in enumerate(gt)
            if gt_idx not in matched_gt and ann.class_id == det.class_id
        ]
        out.append(
            FalsePositive(
                image_id=detections.image_id,
                detection=det,
                best_gt_iou=max(available, default=0.0),
            )
        )
    return out


def matched_pairs(
    detections: DetectionSet,
    gt: list[AnnotationBox],
    iou_threshold: float = 0.5,
) -> dict[int, int]:
    """Greedy one-to-one matching, gt index -> detection index.

    Same matching rule as :func:`find_false_positives`, shared by the
    per-box hit-rate computation.
    """
    pairs = []
    for det_idx, det in enumerate(detections):
        for gt_idx, ann in enumerate(gt):
            if ann.class_id != det.class_id:
                continue
            overlap = iou(det.box, ann.box)
            if overlap >= iou_threshold:
                pairs.append((overlap, det_idx, gt_idx))
    pairs.sort(key=lambda p: (-p[0], p[1], p[2]))
    assignment: dict[int, int] = {}
    used_det: set[int] = set()
    for overlap, det_idx, gt_idx in pairs:
        if det_idx in used_det or gt_idx in assignment:
            continue
        assignment[gt_idx] = det_idx
        used_det.add(det_idx)
    return assignment


@dataclass(frozen=True)
class TriageReport:
    """Versioned, re-emittable review document."""

    false_positives: tuple[FalsePositive, ...]
    overlay_paths: tuple[str, ...] = ()
    notes: str = ""

    def category_counts(self) -> dict[str, int]:
        counts = {c: 0 for c in CATEGORIES}
        for fp in self.false_positives:
            counts[fp.category] += 1
        return counts

    def to_json(self) -> dict:
        return {
            "version": 1,
            "false_positives": [fp.to_json() for fp in self.false_positives],
            "category_counts": self.category_counts(),
            "overlay_paths": list(self.overlay_paths),
            "notes": self.notes,
        }

    def save(self, path: str | Path) -> Path:
        out = Path(path)
        out.parent.mkdir(parents=True, exist_ok=True)
        out.write_text(json.dumps(self.to_json(), sort_keys=True, indent=2) + "\n")
        return out

    @classmethod
    def load(cls, path: str | Path) -> "TriageReport":
        obj = json.loads(Path(path).read_text())
        return cls(
            false_positives=tuple(
                FalsePositive.from_json(e) for e in obj["false_positives"]
            ),
            overlay_paths=tuple(obj.get("overlay_paths", [])),
            notes=str(obj.get("notes", "")),
        )


def build_triage_report(
    false_positives: list[FalsePositive],
    overlay_paths: list[str] | None = None,
    notes: str = "",
) -> TriageReport:
    ordered = tuple(
        sorted(false_positives, key=lambda fp: (fp.image_id, -fp.detection.score))
    )
    return TriageReport(
        false_positives=ordered,
        overlay_paths=tuple(overlay_paths or []),
        notes=notes,
    )
