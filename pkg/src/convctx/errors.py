"""Exception types raised across the package."""


class ConvctxError(Exception):
    """Base class for all errors raised by this package."""


class CorpusError(ConvctxError):
    """Invalid corpus structure or failed validation."""


class ManifestError(CorpusError):
    """Malformed manifest file; message carries the offending line number."""


class FeatureError(ConvctxError):
    """Featurization failure or missing cached features."""


class SamplingError(ConvctxError):
    """No eligible candidate for the requested window or triplet."""


class EncoderError(ConvctxError):
    """Dimension mismatch or invalid encoder input."""


class CheckpointError(ConvctxError):
    """Unreadable, truncated, or incompatible checkpoint file."""


class TrainingError(ConvctxError):
    """Training aborted (non-finite loss) or invalid training request."""


class MetricError(ConvctxError):
    """Invalid metric input (empty sequence, length mismatch, bad epsilon)."""


class ConfigError(ConvctxError):
    """Invalid or inconsistent run configuration."""
