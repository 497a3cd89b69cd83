"""Exception types shared across the package."""


class ConfigError(ValueError):
    """Invalid configuration value or unknown config key."""


class SchemaError(ValueError):
    """Annotation file violates the expected JSON schema."""


class ShapeError(ValueError):
    """Tensor or pyramid shapes violate a module contract."""


class TrainingError(RuntimeError):
    """Training aborted, e.g. because the loss became nonfinite."""

    def __init__(self, message: str, breakdown=None):
        super().__init__(message)
        self.breakdown = breakdown
