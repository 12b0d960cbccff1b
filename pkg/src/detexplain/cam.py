"""Gradient-based class activation maps for individual detections.

Two variants over the same activation tensor A and gradient tensor
G = d(class score)/dA, differing only in where the ReLU sits:

* layercam: per-channel ReLU on the gradients first, then the
  element-wise product with activations, summed over channels.
* hirescam: element-wise products summed over channels first, then one
  ReLU on the result.

Raw maps live at the introspection layer's (U, V) resolution; they are
bilinearly upsampled to image size with corner-aligned sampling and then
min-max normalized (in that order, fixed for reproducibility).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .adapter.base import DetectorAdapter
from .core import Detection, minmax_normalize

CAM_METHODS = ("layercam", "hirescam")
AGGREGATION_MODES = ("max", "mean")


@dataclass(frozen=True)
class CamRequest:
    """One image's worth of activation-map work."""

    image: np.ndarray
    targets: tuple[Detection, ...]
    layer: str
    method: str = "layercam"
    aggregation: str = "max"

    def __post_init__(self) -> None:
        if self.method not in CAM_METHODS:
            raise ValueError(f"method must be one of {CAM_METHODS}, got {self.method!r}")
        if self.aggregation not in AGGREGATION_MODES:
            raise ValueError(
                f"aggregation must be one of {AGGREGATION_MODES}, got {self.aggregation!r}"
            )
        if not self.targets:
            raise ValueError("targets must be non-empty")


def _check_shapes(activations: np.ndarray, gradients: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    a = np.asarray(activations, dtype=np.float64)
    g = np.asarray(gradients, dtype=np.float64)
    if a.shape != g.shape:
        raise ValueError(f"shape mismatch: activations {a.shape} vs gradients {g.shape}")
    if a.ndim != 3:
        raise ValueError(f"expected (K, U, V) tensors, got {a.shape}")
    return a, g


def layercam_raw(activations: np.ndarray, gradients: np.ndarray) -> np.ndarray:
    """sum_k ReLU(G_k) * A_k, a (U, V) map."""
    a, g = _check_shapes(activations, gradients)
    return (np.maximum(g, 0.0) * a).sum(axis=0)


def hirescam_raw(activations: np.ndarray, gradients: np.ndarray) -> np.ndarray:
    """ReLU(sum_k A_k * G_k), a (U, V) map."""
    a, g = _check_shapes(activations, gradients)
    return np.maximum((a * g).sum(axis=0), 0.0)


def bilinear_upsample(raw: np.ndarray, out_height: int, out_width: int) -> np.ndarray:
    """Corner-aligned bilinear interpolation of a 2-D map.

    Output corners sample exactly the input corners; a single-row or
    single-column input broadcasts along that axis.
    """
    arr = np.asarray(raw, dtype=np.float64)
    if arr.ndim != 2:
        raise ValueError(f"expected a 2-D map, got shape {arr.shape}")
    in_h, in_w = arr.shape
    ys = _corner_aligned_coords(in_h, out_height)
    xs = _corner_aligned_coords(in_w, out_width)
    y0 = np.floor(ys).astype(int)
    x0 = np.floor(xs).astype(int)
    y1 = np.minimum(y0 + 1, in_h - 1)
    x1 = np.minimum(x0 + 1, in_w - 1)
    wy = (ys - y0)[:, None]
    wx = (xs - x0)[None, :]
    top = arr[y0][:, x0] * (1 - wx) + arr[y0][:, x1] * wx
    bottom = arr[y1][:, x0] * (1 - wx) + arr[y1][:, x1] * wx
    return top * (1 - wy) + bottom * wy


def _corner_aligned_coords(in_size: int, out_size: int) -> np.ndarray:
    if out_size < 1:
        raise ValueError("output size must be >= 1")
    if in_size == 1 or out_size == 1:
        return np.zeros(out_size)
    return np.arange(out_size) * (in_size - 1) / (out_size - 1)


def explain_detection(
    adapter: DetectorAdapter,
    image: np.ndarray,
    target: Detection,
    layer: str,
    method: str = "layercam",
) -> np.ndarray:
    """Normalized (H, W) attribution map for one detection.

    Propagates the adapter's capability error when the backend cannot
    expose gradients.
    """
    if method not in CAM_METHODS:
        raise ValueError(f"method must be one of {CAM_METHODS}, got {method!r}")
    result = adapter.introspect(image, target, layer)
    raw_fn = layercam_raw if method == "layercam" else hirescam_raw
    raw = raw_fn(result.activations, result.gradients)
    height, width = np.asarray(image).shape[:2]
    return minmax_normalize(bilinear_upsample(raw, height, width))


def aggregate_maps(maps: list[np.ndarray], mode: str = "max") -> np.ndarray:
    """Pixel-wise max (default) or mean of equal-shape maps, re-normalized."""
    if not maps:
        raise ValueError("cannot aggregate an empty list of maps")
    if mode not in AGGREGATION_MODES:
        raise ValueError(f"mode must be one of {AGGREGATION_MODES}, got {mode!r}")
    stack = np.stack([np.asarray(m, dtype=np.float64) for m in maps])
    merged = stack.max(axis=0) if mode == "max" else stack.mean(axis=0)
    return minmax_normalize(merged)


def explain_all(adapter: DetectorAdapter, request: CamRequest) -> list[np.ndarray]:
    """Per-target normalized maps for every detection in the request."""
    return [
        explain_detection(adapter, request.image, target, request.layer, request.method)
        for target in request.targets
    ]
