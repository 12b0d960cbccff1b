"""Versioned JSON Schemas for every artifact the toolkit emits."""

from __future__ import annotations

import jsonschema

_NUMBER_OR_NULL = {"type": ["number", "null"]}

DETECTIONS_SCHEMA = {
    "type": "object",
    "required": ["image_id", "detections"],
    "properties": {
        "image_id": {"type": "string"},
        "detections": {
            "type": "array",
            "items": {
                "type": "object",
                "required": ["box", "class", "score"],
                "properties": {
                    "box": {
                        "type": "array",
                        "items": {"type": "number"},
                        "minItems": 4,
                        "maxItems": 4,
                    },
                    "class": {"type": "integer"},
                    "score": {"type": "number", "minimum": 0, "maximum": 1},
                },
            },
        },
    },
}

PERTURBATION_RESULT_SCHEMA = {
    "type": "object",
    "required": [
        "version",
        "target",
        "op",
        "config",
        "selected_segments",
        "confidence_trace",
        "final_confidence",
        "flipped",
        "zero_suppressed",
        "area_fraction",
        "iterations",
    ],
    "properties": {
        "version": {"const": 1},
        "selected_segments": {"type": "array", "items": {"type": "integer"}},
        "confidence_trace": {"type": "array", "items": {"type": "number"}},
        "area_trace": {"type": "array", "items": {"type": "number"}},
        "final_confidence": {"type": "number", "minimum": 0, "maximum": 1},
        "flipped": {"type": "boolean"},
        "zero_suppressed": {"type": "boolean"},
        "area_fraction": {"type": "number", "minimum": 0, "maximum": 1},
        "iterations": {"type": "integer", "minimum": 0},
    },
}

LIME_EXPLANATION_SCHEMA = {
    "type": "object",
    "required": ["version", "weight_mode", "segments", "params"],
    "properties": {
        "version": {"const": 1},
        "weight_mode": {"enum": ["confidence", "area", "uniform"]},
        "segments": {
            "type": "array",
            "items": {
                "type": "object",
                "required": ["id", "beta", "proximity", "final_value"],
                "properties": {
                    "id": {"type": "integer"},
                    "beta": {"type": "number"},
                    "proximity": {"type": "number", "minimum": 0, "maximum": 1},
                    "final_value": {"type": "number", "minimum": 0},
                },
            },
        },
    },
}

_HIT_RATE = {
    "type": "object",
    "required": ["hits", "total", "rate"],
    "properties": {
        "hits": {"type": "integer"},
        "total": {"type": "integer"},
        "rate": _NUMBER_OR_NULL,
    },
}

METRICS_REPORT_SCHEMA = {
    "type": "object",
    "required": ["version", "config", "localization", "faithfulness"],
    "properties": {
        "version": {"const": 1},
        "config": {"type": "object"},
        "localization": {
            "type": "object",
            "additionalProperties": {
                "type": "object",
                "required": [
                    "n",
                    "n_missing",
                    "attribution_ratio_mean",
                    "attribution_ratio_sd",
                    "hit_rate_boxes",
                    "hit_rate_images",
                ],
                "properties": {
                    "n": {"type": "integer"},
                    "n_missing": {"type": "integer"},
                    "attribution_ratio_mean": _NUMBER_OR_NULL,
                    "attribution_ratio_sd": _NUMBER_OR_NULL,
                    "attribution_ratio_single_sample": {"type": "boolean"},
                    "hit_rate_boxes": _HIT_RATE,
                    "hit_rate_images": _HIT_RATE,
                },
            },
        },
        "faithfulness": {
            "type": "object",
            "additionalProperties": {
                "type": "object",
                "required": [
                    "n",
                    "flip_rate",
                    "confidence_drop_mean",
                    "confidence_drop_unflipped",
                    "n_unflipped",
                ],
                "properties": {
                    "n": {"type": "integer", "minimum": 1},
                    "flip_rate": {"type": "number", "minimum": 0, "maximum": 1},
                    "confidence_drop_mean": {
                        "type": "number",
                        "minimum": -1,
                        "maximum": 1,
                    },
                    "confidence_drop_unflipped": _NUMBER_OR_NULL,
                    "n_unflipped": {"type": "integer", "minimum": 0},
                },
            },
        },
    },
}

TRIAGE_REPORT_SCHEMA = {
    "type": "object",
    "required": ["version", "false_positives", "category_counts"],
    "properties": {
        "version": {"const": 1},
        "false_positives": {
            "type": "array",
            "items": {
                "type": "object",
                "required": ["image_id", "detection", "best_gt_iou", "category"],
            },
        },
        "category_counts": {
            "type": "object",
            "additionalProperties": {"type": "integer", "minimum": 0},
        },
        "overlay_paths": {"type": "array", "items": {"type": "string"}},
        "notes": {"type": "string"},
    },
}

MANIFEST_SCHEMA = {
    "type": "object",
    "required": [
        "version",
        "run_id",
        "tool_version",
        "config",
        "config_hash",
        "dataset_hash",
        "seed",
        "started_at",
        "finished_at",
        "images",
    ],
    "properties": {
        "version": {"const": 1},
        "run_id": {"type": "string"},
        "tool_version": {"type": "string"},
        "config_hash": {"type": "string"},
        "dataset_hash": {"type": "string"},
        "seed": {"type": "integer"},
        "images": {
            "type": "object",
            "additionalProperties": {
                "type": "object",
                "required": ["status"],
                "properties": {
                    "status": {"enum": ["ok", "failed"]},
                    "error": {"type": "string"},
                    "warnings": {"type": "array", "items": {"type": "string"}},
                },
            },
        },
    },
}

DATASET_SCHEMA = {
    "type": "object",
    "required": ["version", "split", "label_map", "items", "image_paths"],
    "properties": {
        "version": {"const": 1},
        "split": {"type": "string"},
        "label_map": {"type": "object"},
        "items": {
            "type": "array",
            "items": {
                "type": "object",
                "required": ["image_id", "width", "height", "annotations"],
            },
        },
    },
}


def validate(payload: dict, schema: dict) -> None:
    """Raise ``jsonschema.ValidationError`` when the payload is off-schema."""
    jsonschema.validate(payload, schema)
