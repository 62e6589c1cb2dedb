"""Shared exception types. The CLI maps these onto exit codes."""


class GsAudioError(Exception):
    """Base class for all engine errors."""


class ContractViolation(GsAudioError):
    """An operation was called with arguments that break its contract
    (shape mismatch, non-finite values, empty input)."""


class ConfigError(GsAudioError):
    """Bad configuration value or an unusable parameter combination."""


class SchemaError(GsAudioError):
    """A file is structurally valid but missing a required field."""

    def __init__(self, field, message=None):
        self.field = field
        super().__init__(message or f"missing required field: {field}")


class DataError(GsAudioError):
    """A file parsed but its payload is unusable (NaN values, zero quaternion)."""


class GeometryError(GsAudioError):
    """Degenerate or out-of-bounds geometry (coincident points, source outside room)."""


class MetricUndefined(GsAudioError):
    """An impulse-response metric cannot be estimated from the given response
    (decay range never reached). Callers exclude the sample from averages."""


class EvaluationError(GsAudioError):
    """A numeric evaluation produced a non-finite value."""
