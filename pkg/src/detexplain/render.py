"""Deterministic rendering: heatmaps, box overlays, PNG round trips.

Overlays blend a jet-style colormap (warm = high attribution) into the
image at a fixed alpha of 0.45 on pixels with positive attribution;
zero-attribution pixels keep the original image, so an all-zero map
renders as the plain image with boxes only. Detection boxes are drawn
solid with their score to two decimals, ground-truth boxes dashed.
All output bytes are a pure function of the inputs.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np
from PIL import Image, ImageDraw, ImageFont

from .core import AnnotationBox, Box, DetectionSet, validate_image

OVERLAY_ALPHA = 0.45
_DETECTION_COLOR = (255, 64, 32)
_GT_COLOR = (32, 255, 64)
_DASH_ON, _DASH_OFF = 5, 4


def load_image_png(path: str | Path) -> np.ndarray:
    with Image.open(path) as img:
        arr = np.asarray(img.convert("RGB"), dtype=np.float64)
    return arr / 255.0


def save_image_png(image: np.ndarray, path: str | Path) -> Path:
    arr = validate_image(image)
    out = Path(path)
    out.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(np.round(arr * 255.0).astype(np.uint8), mode="RGB").save(out)
    return out


def save_heatmap_png(attribution: np.ndarray, path: str | Path) -> Path:
    """Grayscale 8-bit export of a normalized attribution map."""
    arr = np.asarray(attribution, dtype=np.float64)
    if arr.min() < 0.0 or arr.max() > 1.0:
        raise ValueError("attribution map must be normalized to [0, 1]")
    out = Path(path)
    out.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(np.round(arr * 255.0).astype(np.uint8), mode="L").save(out)
    return out


def jet_colormap(values: np.ndarray) -> np.ndarray:
    """Map [0, 1] values to RGB in [0, 1], blue through red."""
    v = np.clip(np.asarray(values, dtype=np.float64), 0.0, 1.0)
    r = np.clip(1.5 - np.abs(4.0 * v - 3.0), 0.0, 1.0)
    g = np.clip(1.5 - np.abs(4.0 * v - 2.0), 0.0, 1.0)
    b = np.clip(1.5 - np.abs(4.0 * v - 1.0), 0.0, 1.0)
    return np.stack([r, g, b], axis=-1)


def overlay_attribution(image: np.ndarray, attribution: np.ndarray) -> np.ndarray:
    """Blend the colormapped attribution into the image (see module doc)."""
    img = validate_image(image)
    amap = np.asarray(attribution, dtype=np.float64)
    if amap.shape != img.shape[:2]:
        raise ValueError(
            f"map shape {amap.shape} does not match image {img.shape[:2]}"
        )
    colored = jet_colormap(amap)
    alpha = np.where(amap > 0.0, OVERLAY_ALPHA, 0.0)[..., None]
    return (1.0 - alpha) * img + alpha * colored


def _draw_solid_box(draw: ImageDraw.ImageDraw, box: Box, color: tuple) -> None:
    draw.rectangle(
        [box.x_min, box.y_min, box.x_max - 1, box.y_max - 1], outline=color, width=1
    )


def _draw_dashed_box(draw: ImageDraw.ImageDraw, box: Box, color: tuple) -> None:
    x0, y0, x1, y1 = box.x_min, box.y_min, box.x_max - 1, box.y_max - 1
    for xa, ya, xb, yb in (
        (x0, y0, x1, y0),
        (x0, y1, x1, y1),
        (x0, y0, x0, y1),
        (x1, y0, x1, y1),
    ):
        length = max(abs(xb - xa), abs(yb - ya))
        pos = 0.0
        while pos < length:
            end = min(pos + _DASH_ON, length)
            t0, t1 = pos / max(length, 1), end / max(length, 1)
            draw.line(
                [
                    (xa + (xb - xa) * t0, ya + (yb - ya) * t0),
                    (xa + (xb - xa) * t1, ya + (yb - ya) * t1),
                ],
                fill=color,
                width=1,
            )
            pos = end + _DASH_OFF


def render_overlay(
    image: np.ndarray,
    attribution: np.ndarray | None,
    detections: DetectionSet | None,
    gt: list[AnnotationBox] | None,
    path: str | Path,
) -> Path:
    """Write the composite overlay PNG and return its path."""
    base = validate_image(image)
    if attribution is not None:
        base = overlay_attribution(base, attribution)
    canvas = Image.fromarray(np.round(base * 255.0).astype(np.uint8), mode="RGB")
    draw = ImageDraw.Draw(canvas)
    font = ImageFont.load_default()
    for ann in gt or []:
        _draw_dashed_box(draw, ann.box, _GT_COLOR)
    for det in detections or ():
        _draw_solid_box(draw, det.box, _DETECTION_COLOR)
        label = f"{det.score:.2f}"
        tx = det.box.x_min
        ty = max(0.0, det.box.y_min - 11)
        draw.text((tx, ty), label, fill=_DETECTION_COLOR, font=font)
    out = Path(path)
    out.parent.mkdir(parents=True, exist_ok=True)
    canvas.save(out)
    return out
