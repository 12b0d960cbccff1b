"""Small differentiable conv detector with exact analytic gradients.

Architecture: two 3x3 same-padding conv layers with ReLU, global average
pooling, and a linear two-class head. The forward pass, the class logit,
and the backward pass to any layer's activations are written out by hand
in numpy, so introspection gradients can be validated against central
finite differences of :meth:`TinyConvDetector.class_score_from_activation`
without any autodiff framework in the loop.

The detector side is intentionally simple: one detection per image with a
fixed centered box, class = argmax of the logits, score = sigmoid of the
winning logit.
"""

from __future__ import annotations

from typing import Sequence

import numpy as np

from ..core import Box, Detection, DetectionSet, validate_image
from ..errors import AdapterError
from .base import DetectorAdapter, DetectorConfig, IntrospectionResult

LAYERS = ("conv1", "conv2")
_K1 = 4
_K2 = 4
_CLASSES = 2


def _conv3x3(x: np.ndarray, weight: np.ndarray, bias: np.ndarray) -> np.ndarray:
    """Cross-correlation with 3x3 kernels and zero same-padding.

    ``x``: (C_in, H, W); ``weight``: (C_out, C_in, 3, 3); returns (C_out, H, W).
    """
    c_out = weight.shape[0]
    _, height, width = x.shape
    padded = np.pad(x, ((0, 0), (1, 1), (1, 1)))
    out = np.zeros((c_out, height, width))
    for dy in range(3):
        for dx in range(3):
            patch = padded[:, dy : dy + height, dx : dx + width]
            out += np.einsum("oc,chw->ohw", weight[:, :, dy, dx], patch)
    return out + bias[:, None, None]


def _conv3x3_input_grad(grad_out: np.ndarray, weight: np.ndarray) -> np.ndarray:
    """Gradient of :func:`_conv3x3` w.r.t. its input."""
    c_in = weight.shape[1]
    _, height, width = grad_out.shape
    padded = np.zeros((c_in, height + 2, width + 2))
    for dy in range(3):
        for dx in range(3):
            padded[:, dy : dy + height, dx : dx + width] += np.einsum(
                "oc,ohw->chw", weight[:, :, dy, dx], grad_out
            )
    return padded[:, 1 : 1 + height, 1 : 1 + width]


class TinyConvDetector(DetectorAdapter):
    """Two-conv fixture backend exposing layers ``conv1`` and ``conv2``."""

    def __init__(
        self,
        config: DetectorConfig | None = None,
        weight_seed: int = 0,
        head_weight: np.ndarray | None = None,
        head_bias: np.ndarray | None = None,
    ) -> None:
        super().__init__(config)
        rng = np.random.default_rng(weight_seed)
        self.w1 = rng.normal(scale=0.5, size=(_K1, 3, 3, 3))
        self.b1 = rng.normal(scale=0.1, size=_K1)
        self.w2 = rng.normal(scale=0.5, size=(_K2, _K1, 3, 3))
        self.b2 = rng.normal(scale=0.1, size=_K2)
        self.head_weight = (
            np.asarray(head_weight, dtype=np.float64)
            if head_weight is not None
            else rng.normal(scale=1.0, size=(_CLASSES, _K2))
        )
        self.head_bias = (
            np.asarray(head_bias, dtype=np.float64)
            if head_bias is not None
            else rng.normal(scale=0.1, size=_CLASSES)
        )

    def layer_shape(self, layer: str, height: int, width: int) -> tuple[int, int, int]:
        if layer == "conv1":
            return (_K1, height, width)
        if layer == "conv2":
            return (_K2, height, width)
        raise AdapterError(f"unknown layer {layer!r}; have {LAYERS}")

    # forward pieces -----------------------------------------------------

    def _forward(self, image: np.ndarray) -> dict[str, np.ndarray]:
        x = validate_image(image).transpose(2, 0, 1)
        pre1 = _conv3x3(x, self.w1, self.b1)
        a1 = np.maximum(pre1, 0.0)
        pre2 = _conv3x3(a1, self.w2, self.b2)
        a2 = np.maximum(pre2, 0.0)
        pooled = a2.mean(axis=(1, 2))
        logits = self.head_weight @ pooled + self.head_bias
        return {"pre2": pre2, "conv1": a1, "conv2": a2, "logits": logits}

    def class_score_from_activation(
        self, layer: str, activation: np.ndarray, class_id: int
    ) -> float:
        """Class logit recomputed from a (possibly perturbed) activation.

        This is the function whose finite differences the introspection
        gradients must reproduce.
        """
        a = np.asarray(activation, dtype=np.float64)
        if layer == "conv1":
            a = np.maximum(_conv3x3(a, self.w2, self.b2), 0.0)
        elif layer != "conv2":
            raise AdapterError(f"unknown layer {layer!r}; have {LAYERS}")
        pooled = a.mean(axis=(1, 2))
        logits = self.head_weight @ pooled + self.head_bias
        return float(logits[class_id])

    # adapter interface --------------------------------------------------

    def detect(self, images: Sequence[np.ndarray]) -> list[DetectionSet]:
        self._check_batch(images)
        out = []
        for image in images:
            img = validate_image(image)
            height, width = img.shape[:2]
            logits = self._forward(img)["logits"]
            class_id = int(np.argmax(logits))
            score = float(1.0 / (1.0 + np.exp(-logits[class_id])))
            box = Box(width / 4.0, height / 4.0, 3.0 * width / 4.0, 3.0 * height / 4.0)
            dets: tuple[Detection, ...] = ()
            if score >= self.config.score_threshold:
                dets = (Detection(box=box, class_id=class_id, score=score),)
            out.append(DetectionSet(detections=dets))
        return out

    def introspect(
        self, image: np.ndarray, target: Detection, layer: str
    ) -> IntrospectionResult:
        if layer not in LAYERS:
            raise AdapterError(f"unknown layer {layer!r}; have {LAYERS}")
        state = self._forward(image)
        y_c = float(state["logits"][target.class_id])
        a2 = state["conv2"]
        _, height, width = a2.shape
        # d y_c / d a2 via the pooled linear head
        grad_a2 = np.broadcast_to(
            self.head_weight[target.class_id][:, None, None] / (height * width),
            a2.shape,
        ).copy()
        if layer == "conv2":
            return IntrospectionResult(
                activations=a2,
                gradients=grad_a2,
                target_index=0,
                target_value=y_c,
            )
        grad_pre2 = grad_a2 * (state["pre2"] > 0.0)
        grad_a1 = _conv3x3_input_grad(grad_pre2, self.w2)
        return IntrospectionResult(
            activations=state["conv1"],
            gradients=grad_a1,
            target_index=0,
            target_value=y_c,
        )

    def supports_introspection(self) -> bool:
        return True
