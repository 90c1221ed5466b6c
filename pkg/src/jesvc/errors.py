"""Exception types shared across the package."""


class JesError(Exception):
    """Base class for all errors raised by this package."""


class ConfigurationError(JesError, ValueError):
    """A configuration value is missing, unknown, or unsupported."""


class BackendUnavailableError(JesError, RuntimeError):
    """The selected vocoder backend cannot be used in this environment."""


class FeatureError(JesError, ValueError):
    """Input audio or features violate a shape or content contract."""


class F0StatsError(FeatureError):
    """F0 statistics are undefined or degenerate."""


class ManifestError(JesError, ValueError):
    """A manifest file or entry list failed validation."""


class CheckpointError(JesError, ValueError):
    """A checkpoint is unreadable or incompatible with the requested model."""


class ConversionError(JesError, ValueError):
    """A conversion request cannot be served."""


class InvariantViolation(JesError, RuntimeError):
    """An internal consistency check failed (a bug, not bad input)."""


class TrainingError(JesError, RuntimeError):
    """Training diverged or was given inconsistent inputs."""
