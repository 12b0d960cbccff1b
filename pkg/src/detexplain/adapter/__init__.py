"""Detector backends behind a uniform detect/introspect contract."""

from .base import DetectorAdapter, DetectorConfig, IntrospectionResult  # noqa: F401
from .bridge import BridgeAdapter  # noqa: F401
from .tinyconv import TinyConvDetector  # noqa: F401
from .toy import ToyBlobDetector, ToyDetectorParams, toy_detect  # noqa: F401
