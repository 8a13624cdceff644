"""Error categories shared across modules."""


class ConfigurationError(ValueError):
    """A component was asked to run without the setup it needs."""


class TrainingError(RuntimeError):
    """Optimization aborted; message carries iteration/style/camera diagnostics."""


class EvaluationError(RuntimeError):
    """A metric could not be computed (e.g. no valid pixels)."""
