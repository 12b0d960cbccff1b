"""Batch orchestration with reproducible configs and run manifests.

A run is identified by the hash of its config; rerunning the same config
and seed overwrites the same directory with byte-identical artifacts
(the manifest's timestamps are the only exception, by design). Layout::

    {output_dir}/{run_id}/
        manifest.json
        images/     per-image JSON (detections, LIME, perturbation results)
        maps/       attribution arrays (.npy), heatmap PNGs, segment maps
        overlays/   rendered composites
        reports/    metrics.json, triage.json, CSV exports, validation

Image-level work parallelizes across a configurable worker count; every
reduction sorts by image id first, so results are independent of
scheduling order. Bridge backends get one adapter (hence one child
process) per worker thread.
"""

from __future__ import annotations

import hashlib
import json
import os
import shlex
import threading
import zlib
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import __version__
from .adapter import (
    BridgeAdapter,
    DetectorAdapter,
    DetectorConfig,
    TinyConvDetector,
    ToyBlobDetector,
    ToyDetectorParams,
)
from .cam import aggregate_maps, explain_detection
from .core import DetectionSet, detection_set_from_json, detection_set_to_json
from .dataset import Dataset
from .errors import CapabilityError, DetexplainError, NoDetectionsError
from .lime_detect import LimeParams, explain_image
from .metrics import (
    FaithfulnessRecord,
    FidelityParams,
    FidelityRecord,
    MetricsReport,
    aggregate_report,
    attribution_ratio,
    max_saliency_hit,
    write_csv,
)
from .perturb import (
    PerturbationOp,
    PerturbationResult,
    SearchConfig,
    greedy_deletion,
)
from .render import load_image_png, render_overlay, save_heatmap_png
from .schemas import (
    MANIFEST_SCHEMA,
    METRICS_REPORT_SCHEMA,
    TRIAGE_REPORT_SCHEMA,
    validate,
)
from .segmentation import SegmentMap, SlicParams, filter_segments, slic_segments, to_lab
from .triage import FalsePositive, TriageReport, build_triage_report, find_false_positives, matched_pairs

BRIDGE_COMMAND_ENV = "DETEXPLAIN_BRIDGE_CMD"
BACKENDS = ("toy", "tinyconv", "bridge")


@dataclass(frozen=True)
class RunConfig:
    """Everything a run needs, reconstructible from one JSON file."""

    backend: str = "toy"
    bridge_command: tuple[str, ...] | None = None
    detector: DetectorConfig = field(default_factory=DetectorConfig)
    toy_params: ToyDetectorParams = field(default_factory=ToyDetectorParams)
    cam_methods: tuple[str, ...] = ("layercam", "hirescam")
    cam_aggregation: str = "max"
    slic: SlicParams = field(default_factory=SlicParams)
    min_area_fraction: float = 5e-4
    black_lightness_threshold: float = 5.0
    lime: LimeParams = field(default_factory=LimeParams)
    perturb_ops: tuple[str, ...] = ("mask_mean", "mask_black", "noise", "blur")
    blur_sigma: float = 5.0
    noise_level: float = 0.6
    mask_dilation_px: int = 2
    save_edited: bool = False
    search: SearchConfig = field(default_factory=SearchConfig)
    fidelity: FidelityParams = field(default_factory=FidelityParams)
    triage_iou_threshold: float = 0.5
    triage_score_threshold: float = 0.5
    seed: int = 0
    workers: int = 1
    output_dir: str = "runs"

    def __post_init__(self) -> None:
        if self.backend not in BACKENDS:
            raise ValueError(f"backend must be one of {BACKENDS}")
        if self.workers < 1:
            raise ValueError("workers must be >= 1")

    def to_json(self) -> dict:
        return {
            "backend": self.backend,
            "bridge_command": list(self.bridge_command) if self.bridge_command else None,
            "detector": {
                "score_threshold": self.detector.score_threshold,
                "layer_name": self.detector.layer_name,
                "batch_limit": self.detector.batch_limit,
            },
            "toy": {
                "contrast_threshold": self.toy_params.contrast_threshold,
                "max_contrast": self.toy_params.max_contrast,
                "min_area": self.toy_params.min_area,
                "black_floor": self.toy_params.black_floor,
                "roughness_max": self.toy_params.roughness_max,
                "surround_margin": self.toy_params.surround_margin,
            },
            "cam": {"methods": list(self.cam_methods), "aggregation": self.cam_aggregation},
            "slic": {
                "n_segments": self.slic.n_segments,
                "compactness": self.slic.compactness,
                "smoothing_sigma": self.slic.smoothing_sigma,
                "seed": self.slic.seed,
            },
            "segment_filter": {
                "min_area_fraction": self.min_area_fraction,
                "black_lightness_threshold": self.black_lightness_threshold,
            },
            "lime": {
                "n_samples": self.lime.n_samples,
                "keep_probability": self.lime.keep_probability,
                "kernel_width": self.lime.kernel_width,
                "ridge_strength": self.lime.ridge_strength,
                "fill": self.lime.fill if isinstance(self.lime.fill, str) else list(self.lime.fill),
                "iou_match_threshold": self.lime.iou_match_threshold,
                "weight_mode": self.lime.weight_mode,
                "proximity_scale": self.lime.proximity_scale,
                "seed": self.lime.seed,
            },
            "perturb": {
                "ops": list(self.perturb_ops),
                "blur_sigma": self.blur_sigma,
                "noise_level": self.noise_level,
                "mask_dilation_px": self.mask_dilation_px,
                "search": self.search.to_json(),
            },
            "metrics": {"attribution_threshold": self.fidelity.attribution_threshold},
            "triage": {
                "iou_threshold": self.triage_iou_threshold,
                "score_threshold": self.triage_score_threshold,
            },
            "seed": self.seed,
            "workers": self.workers,
            "output_dir": self.output_dir,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "RunConfig":
        detector = obj.get("detector", {})
        toy = obj.get("toy", {})
        cam = obj.get("cam", {})
        slic = obj.get("slic", {})
        seg_filter = obj.get("segment_filter", {})
        lime = dict(obj.get("lime", {}))
        if isinstance(lime.get("fill"), list):
            lime["fill"] = tuple(lime["fill"])
        perturb = obj.get("perturb", {})
        metrics = obj.get("metrics", {})
        triage = obj.get("triage", {})
        bridge_command = obj.get("bridge_command")
        return cls(
            backend=obj.get("backend", "toy"),
            bridge_command=tuple(bridge_command) if bridge_command else None,
            detector=DetectorConfig(**detector),
            toy_params=ToyDetectorParams(**toy),
            cam_methods=tuple(cam.get("methods", ("layercam", "hirescam"))),
            cam_aggregation=cam.get("aggregation", "max"),
            slic=SlicParams(**slic),
            min_area_fraction=seg_filter.get("min_area_fraction", 5e-4),
            black_lightness_threshold=seg_filter.get("black_lightness_threshold", 5.0),
            lime=LimeParams(**lime),
            perturb_ops=tuple(perturb.get("ops", ("mask_mean", "mask_black", "noise", "blur"))),
            blur_sigma=perturb.get("blur_sigma", 5.0),
            noise_level=perturb.get("noise_level", 0.6),
            mask_dilation_px=perturb.get("mask_dilation_px", 2),
            search=SearchConfig(**perturb.get("search", {})),
            fidelity=FidelityParams(
                attribution_threshold=metrics.get("attribution_threshold", 0.5)
            ),
            triage_iou_threshold=triage.get("iou_threshold", 0.5),
            triage_score_threshold=triage.get("score_threshold", 0.5),
            seed=obj.get("seed", 0),
            workers=obj.get("workers", 1),
            output_dir=obj.get("output_dir", "runs"),
        )

    def config_hash(self) -> str:
        canonical = json.dumps(self.to_json(), sort_keys=True)
        return hashlib.sha256(canonical.encode("utf-8")).hexdigest()

    def run_id(self) -> str:
        return "run-" + self.config_hash()[:12]


def load_config(path: str | Path) -> RunConfig:
    return RunConfig.from_json(json.loads(Path(path).read_text()))


def make_adapter(config: RunConfig) -> DetectorAdapter:
    """Instantiate the configured backend; env var overrides bridge command."""
    if config.backend == "toy":
        return ToyBlobDetector(config.detector, config.toy_params)
    if config.backend == "tinyconv":
        return TinyConvDetector(config.detector, weight_seed=config.seed)
    command = os.environ.get(BRIDGE_COMMAND_ENV)
    if command:
        return BridgeAdapter(shlex.split(command), config.detector)
    if not config.bridge_command:
        raise DetexplainError(
            f"bridge backend needs bridge_command or ${BRIDGE_COMMAND_ENV}"
        )
    return BridgeAdapter(list(config.bridge_command), config.detector)


class _AdapterPool:
    """One adapter per worker thread; pure backends could share, bridge must not."""

    def __init__(self, config: RunConfig) -> None:
        self._config = config
        self._local = threading.local()
        self._created: list[DetectorAdapter] = []
        self._lock = threading.Lock()

    def get(self) -> DetectorAdapter:
        adapter = getattr(self._local, "adapter", None)
        if adapter is None:
            adapter = make_adapter(self._config)
            self._local.adapter = adapter
            with self._lock:
                self._created.append(adapter)
        return adapter

    def close(self) -> None:
        for adapter in self._created:
            close = getattr(adapter, "close", None)
            if close:
                close()


@dataclass(frozen=True)
class RunPaths:
    root: Path

    @property
    def images(self) -> Path:
        return self.root / "images"

    @property
    def maps(self) -> Path:
        return self.root / "maps"

    @property
    def overlays(self) -> Path:
        return self.root / "overlays"

    @property
    def reports(self) -> Path:
        return self.root / "reports"

    def ensure(self) -> "RunPaths":
        for directory in (self.images, self.maps, self.overlays, self.reports):
            directory.mkdir(parents=True, exist_ok=True)
        return self


def run_paths(config: RunConfig) -> RunPaths:
    return RunPaths(Path(config.output_dir) / config.run_id())


def _write_json(path: Path, payload: dict) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(payload, sort_keys=True, indent=2) + "\n")


def _image_seed(seed: int, image_id: str) -> int:
    """Stable per-image seed for the stochastic perturbation operator."""
    return (seed * 1000003 + zlib.crc32(image_id.encode("utf-8"))) & 0x7FFFFFFF


def _segmap_for(image: np.ndarray, config: RunConfig) -> SegmentMap:
    segmap = slic_segments(to_lab(image), config.slic)
    return filter_segments(
        segmap,
        min_area_fraction=config.min_area_fraction,
        black_lightness_threshold=config.black_lightness_threshold,
    )


def _explain_one(
    item, config: RunConfig, adapter: DetectorAdapter, paths: RunPaths
) -> dict:
    warnings: list[str] = []
    image = load_image_png(item.image_path)
    detections = adapter.detect([image])[0]
    detections = DetectionSet(detections=detections.detections, image_id=item.image_id)
    _write_json(
        paths.images / f"{item.image_id}_detections.json",
        detection_set_to_json(detections),
    )

    segmap = _segmap_for(image, config)
    segmap.save(paths.maps / f"{item.image_id}_segments")

    gt = list(item.annotations)
    if not detections.detections:
        warnings.append("no detections; explanation maps skipped")
        render_overlay(
            image, None, detections, gt, paths.overlays / f"{item.image_id}_plain.png"
        )
        return {"status": "ok", "warnings": warnings}

    for method in config.cam_methods:
        try:
            per_target = [
                explain_detection(adapter, image, det, config.detector.layer_name, method)
                for det in detections
            ]
        except CapabilityError as exc:
            warnings.append(f"cam {method} skipped: {exc}")
            continue
        for k, amap in enumerate(per_target):
            np.save(paths.maps / f"{item.image_id}_{method}_det{k}.npy", amap)
        aggregated = aggregate_maps(per_target, config.cam_aggregation)
        np.save(paths.maps / f"{item.image_id}_{method}_agg.npy", aggregated)
        save_heatmap_png(aggregated, paths.maps / f"{item.image_id}_{method}_agg.png")
        render_overlay(
            image,
            aggregated,
            detections,
            gt,
            paths.overlays / f"{item.image_id}_{method}.png",
        )

    try:
        explanation = explain_image(
            adapter,
            image,
            segmap,
            config.lime,
            reference=detections,
            with_instance_maps=True,
        )
    except NoDetectionsError as exc:
        warnings.append(f"lime skipped: {exc}")
        return {"status": "ok", "warnings": warnings}
    np.save(paths.maps / f"{item.image_id}_lime_agg.npy", explanation.attribution)
    for k, amap in enumerate(explanation.instance_maps):
        np.save(paths.maps / f"{item.image_id}_lime_det{k}.npy", amap)
    save_heatmap_png(
        explanation.attribution, paths.maps / f"{item.image_id}_lime_agg.png"
    )
    _write_json(
        paths.images / f"{item.image_id}_lime.json", explanation.to_json()
    )
    render_overlay(
        image,
        explanation.attribution,
        detections,
        gt,
        paths.overlays / f"{item.image_id}_lime.png",
    )
    return {"status": "ok", "warnings": warnings}


def run_explain(dataset: Dataset, config: RunConfig) -> Path:
    """Produce per-image explanation artifacts plus the run manifest.

    Individual image failures are recorded and skipped; the run raises
    only when every image fails.
    """
    paths = run_paths(config).ensure()
    started = datetime.now(timezone.utc).isoformat()
    pool = _AdapterPool(config)
    statuses: dict[str, dict] = {}

    def task(item) -> tuple[str, dict]:
        try:
            return item.image_id, _explain_one(item, config, pool.get(), paths)
        except Exception as exc:  # per-image isolation is the contract
            return item.image_id, {"status": "failed", "error": f"{type(exc).__name__}: {exc}"}

    try:
        if config.workers == 1:
            results = [task(item) for item in dataset.items]
        else:
            with ThreadPoolExecutor(max_workers=config.workers) as pool_exec:
                results = list(pool_exec.map(task, dataset.items))
    finally:
        pool.close()
    statuses = {image_id: status for image_id, status in sorted(results)}

    if statuses and all(s["status"] == "failed" for s in statuses.values()):
        raise DetexplainError(
            "explanation run failed for every image: "
            + "; ".join(f"{k}: {v['error']}" for k, v in statuses.items())
        )

    manifest = {
        "version": 1,
        "run_id": config.run_id(),
        "tool_version": __version__,
        "config": config.to_json(),
        "config_hash": config.config_hash(),
        "dataset_hash": dataset.content_hash(),
        "seed": config.seed,
        "started_at": started,
        "finished_at": datetime.now(timezone.utc).isoformat(),
        "images": statuses,
    }
    validate(manifest, MANIFEST_SCHEMA)
    _write_json(paths.root / "manifest.json", manifest)
    return paths.root


def run_perturb(dataset: Dataset, config: RunConfig) -> Path:
    """Greedy deletion for every detection and operator; emits result JSON."""
    paths = run_paths(config).ensure()
    pool = _AdapterPool(config)

    def task(item) -> tuple[str, dict]:
        try:
            detections_path = paths.images / f"{item.image_id}_detections.json"
            if not detections_path.exists():
                return item.image_id, {
                    "status": "failed",
                    "error": "missing detections; run explain first",
                }
            detections = detection_set_from_json(json.loads(detections_path.read_text()))
            if not detections.detections:
                return item.image_id, {"status": "ok", "warnings": ["no targets"]}
            image = load_image_png(item.image_path)
            segmap = SegmentMap.load(paths.maps / f"{item.image_id}_segments")
            adapter = pool.get()
            op_seed = _image_seed(config.seed, item.image_id)
            for kind in config.perturb_ops:
                op = PerturbationOp(
                    kind=kind,
                    blur_sigma=config.blur_sigma,
                    noise_level=config.noise_level,
                    mask_dilation_px=config.mask_dilation_px,
                    seed=op_seed,
                )
                for k, target in enumerate(detections):
                    result = greedy_deletion(
                        adapter, image, target, op, segmap, config.search
                    )
                    _write_json(
                        paths.images / f"{item.image_id}_perturb_{kind}_{k}.json",
                        result.to_json(),
                    )
            return item.image_id, {"status": "ok", "warnings": []}
        except Exception as exc:
            return item.image_id, {
                "status": "failed",
                "error": f"{type(exc).__name__}: {exc}",
            }

    try:
        if config.workers == 1:
            results = [task(item) for item in dataset.items]
        else:
            with ThreadPoolExecutor(max_workers=config.workers) as pool_exec:
                results = list(pool_exec.map(task, dataset.items))
    finally:
        pool.close()

    statuses = {image_id: status for image_id, status in sorted(results)}
    if statuses and all(s["status"] == "failed" for s in statuses.values()):
        raise DetexplainError("perturbation run failed for every image")
    _write_json(paths.reports / "perturb_status.json", statuses)
    return paths.root


def _fidelity_records(
    dataset: Dataset, config: RunConfig, paths: RunPaths
) -> list[FidelityRecord]:
    methods = list(config.cam_methods) + ["lime"]
    records: list[FidelityRecord] = []
    theta = config.fidelity.attribution_threshold
    for item in sorted(dataset.items, key=lambda i: i.image_id):
        det_path = paths.images / f"{item.image_id}_detections.json"
        if not det_path.exists():
            continue
        detections = detection_set_from_json(json.loads(det_path.read_text()))
        gt = list(item.annotations)
        for method in methods:
            agg_path = paths.maps / f"{item.image_id}_{method}_agg.npy"
            if not agg_path.exists():
                continue
            aggregated = np.load(agg_path)
            if gt:
                ratio = attribution_ratio(aggregated, gt, theta)
                image_hit = max_saliency_hit(aggregated, gt)
            else:
                ratio, image_hit = None, None
            boxes_hit = 0
            assignment = matched_pairs(detections, gt, config.triage_iou_threshold)
            for gt_idx, det_idx in assignment.items():
                det_map_path = paths.maps / f"{item.image_id}_{method}_det{det_idx}.npy"
                if not det_map_path.exists():
                    continue
                if max_saliency_hit(np.load(det_map_path), [gt[gt_idx]]):
                    boxes_hit += 1
            records.append(
                FidelityRecord(
                    image_id=item.image_id,
                    method=method,
                    attribution_ratio=ratio,
                    image_hit=image_hit,
                    boxes_hit=boxes_hit,
                    boxes_total=len(gt),
                )
            )
    return records


def _faithfulness_records(
    dataset: Dataset, config: RunConfig, paths: RunPaths
) -> list[FaithfulnessRecord]:
    records: list[FaithfulnessRecord] = []
    for item in sorted(dataset.items, key=lambda i: i.image_id):
        for kind in config.perturb_ops:
            for path in sorted(
                paths.images.glob(f"{item.image_id}_perturb_{kind}_*.json")
            ):
                result = PerturbationResult.from_json(json.loads(path.read_text()))
                records.append(
                    FaithfulnessRecord(
                        image_id=item.image_id,
                        target=result.target,
                        op_kind=kind,
                        original_confidence=result.target.score,
                        final_confidence=result.final_confidence,
                        area_fraction=result.area_fraction,
                        segment_count=len(result.selected_segments),
                    )
                )
    return records


def _triage_explanation_refs(
    image_id: str, config: RunConfig, paths: RunPaths
) -> dict:
    refs = {}
    for method in list(config.cam_methods) + ["lime"]:
        candidate = paths.maps / f"{image_id}_{method}_agg.png"
        if candidate.exists():
            refs[method] = str(candidate.relative_to(paths.root))
    return refs


def run_evaluate(
    dataset: Dataset, config: RunConfig
) -> tuple[MetricsReport, TriageReport]:
    """Fold artifacts into metrics and triage reports; writes both."""
    paths = run_paths(config).ensure()
    fidelity = _fidelity_records(dataset, config, paths)
    faithfulness = _faithfulness_records(dataset, config, paths)

    report = aggregate_report(
        fidelity, faithfulness, config.to_json(), tau=config.search.tau
    )
    payload = report.to_json()
    validate(payload, METRICS_REPORT_SCHEMA)
    _write_json(paths.reports / "metrics.json", payload)
    write_csv(paths.reports, fidelity, faithfulness)

    false_positives: list[FalsePositive] = []
    overlay_paths: list[str] = []
    for item in sorted(dataset.items, key=lambda i: i.image_id):
        det_path = paths.images / f"{item.image_id}_detections.json"
        if not det_path.exists():
            continue
        detections = detection_set_from_json(json.loads(det_path.read_text()))
        gt = list(item.annotations)
        found = find_false_positives(
            detections,
            gt,
            iou_threshold=config.triage_iou_threshold,
            score_threshold=config.triage_score_threshold,
        )
        if not found:
            continue
        refs = _triage_explanation_refs(item.image_id, config, paths)
        false_positives.extend(
            FalsePositive(
                image_id=fp.image_id,
                detection=fp.detection,
                best_gt_iou=fp.best_gt_iou,
                explanation_refs=refs,
            )
            for fp in found
        )
        overlay = paths.overlays / f"{item.image_id}_triage.png"
        amap = None
        for method in list(config.cam_methods) + ["lime"]:
            agg = paths.maps / f"{item.image_id}_{method}_agg.npy"
            if agg.exists():
                amap = np.load(agg)
                break
        render_overlay(load_image_png(item.image_path), amap, detections, gt, overlay)
        overlay_paths.append(str(overlay.relative_to(paths.root)))

    triage = build_triage_report(false_positives, overlay_paths)
    triage_payload = triage.to_json()
    validate(triage_payload, TRIAGE_REPORT_SCHEMA)
    triage.save(paths.reports / "triage.json")
    return report, triage
