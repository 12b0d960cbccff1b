"""Post-hoc explainability toolkit for object detectors."""

__version__ = "0.1.0"

from .core import (  # noqa: F401
    AnnotationBox,
    Box,
    Detection,
    DetectionSet,
    dilate_box,
    iou,
    match_detection,
    minmax_normalize,
)
