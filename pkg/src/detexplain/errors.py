"""Exception hierarchy shared across the toolkit."""


class DetexplainError(Exception):
    """Base class for all toolkit errors."""


class AdapterError(DetexplainError):
    """Detector backend failed to produce a usable answer."""


class BridgeError(AdapterError):
    """External bridge process died or replied with a malformed message."""


class CapabilityError(AdapterError):
    """Backend cannot serve the request (e.g. detect-only, no gradients)."""


class NoDetectionsError(DetexplainError):
    """An operation that needs at least one detection got none."""


class NoEligibleRegionError(DetexplainError):
    """No eligible superpixels intersect the target box or its ring."""


class SingularFitError(DetexplainError):
    """Surrogate design matrix is rank deficient and ridge is zero."""


class MetricsError(DetexplainError):
    """Metric is undefined for the given inputs (e.g. empty ground truth)."""


class IngestError(DetexplainError):
    """Dataset ingestion could not produce any usable entries."""
