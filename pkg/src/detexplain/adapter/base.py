"""Uniform detector contract: detection plus gradient/activation introspection.

Backends implement :class:`DetectorAdapter`. ``detect`` must be
deterministic for a fixed backend and config; ``introspect`` is optional
(detect-only backends raise :class:`~detexplain.errors.CapabilityError`,
in which case activation-map explanations are unavailable while LIME and
perturbation search still work).
"""

from __future__ import annotations

from abc import ABC, abstractmethod
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from ..core import Detection, DetectionSet
from ..errors import CapabilityError


@dataclass(frozen=True)
class DetectorConfig:
    """Backend-independent detector settings.

    ``layer_name`` identifies the introspection layer; the sensible choice
    is the last conv block of the backbone, but the right name is a
    property of the backend and must be supplied by the caller.
    """

    score_threshold: float = 0.5
    layer_name: str = ""
    batch_limit: int = 32

    def __post_init__(self) -> None:
        if not (0.0 <= self.score_threshold < 1.0):
            raise ValueError(
                f"score_threshold must be in [0, 1), got {self.score_threshold}"
            )
        if self.batch_limit < 1:
            raise ValueError(f"batch_limit must be >= 1, got {self.batch_limit}")


@dataclass(frozen=True)
class IntrospectionResult:
    """Activations A and gradients G = d(class score)/dA for one detection."""

    activations: np.ndarray
    gradients: np.ndarray
    target_index: int
    target_value: float

    def __post_init__(self) -> None:
        a = np.asarray(self.activations, dtype=np.float64)
        g = np.asarray(self.gradients, dtype=np.float64)
        if a.shape != g.shape:
            raise ValueError(
                f"activation/gradient shape mismatch: {a.shape} vs {g.shape}"
            )
        if a.ndim != 3:
            raise ValueError(f"expected (K, U, V) tensors, got {a.shape}")
        if not np.isfinite(g).all():
            raise ValueError("gradients must be finite")
        object.__setattr__(self, "activations", a)
        object.__setattr__(self, "gradients", g)


class DetectorAdapter(ABC):
    """Query interface every detector backend satisfies."""

    def __init__(self, config: DetectorConfig | None = None) -> None:
        self.config = config or DetectorConfig()

    @abstractmethod
    def detect(self, images: Sequence[np.ndarray]) -> list[DetectionSet]:
        """One post-NMS detection set per image, stable-ordered and filtered
        by ``config.score_threshold``. At most ``config.batch_limit`` images
        per call."""

    def introspect(
        self, image: np.ndarray, target: Detection, layer: str
    ) -> IntrospectionResult:
        """Activations and gradients of the target's class score at ``layer``.

        The target must come from :meth:`detect` on the same image.
        """
        raise CapabilityError(
            f"{type(self).__name__} does not expose gradients"
        )

    def supports_introspection(self) -> bool:
        return False

    def _check_batch(self, images: Sequence[np.ndarray]) -> None:
        if len(images) > self.config.batch_limit:
            raise ValueError(
                f"batch of {len(images)} exceeds batch_limit {self.config.batch_limit}"
            )
