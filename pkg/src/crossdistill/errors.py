"""Exception types shared across the package."""


class CrossDistillError(Exception):
    """Base class for all package errors."""


class ShapeError(CrossDistillError, ValueError):
    pass


class DomainError(CrossDistillError, ValueError):
    """A value lies outside the mathematical domain of an operation."""


class ConfigError(CrossDistillError, ValueError):
    pass


class SchemaError(CrossDistillError, ValueError):
    pass


class DataError(CrossDistillError, ValueError):
    pass


class ConflictError(CrossDistillError):
    """Raised when writing into a teacher-label slot that is already filled."""


class UndefinedMetricError(CrossDistillError, ValueError):
    """A metric is undefined for the given inputs (single class, zero variance)."""


class PairingError(CrossDistillError, ValueError):
    pass


class StageError(CrossDistillError):
    """A pipeline stage failed; ``stage`` names it."""

    def __init__(self, stage, cause):
        super().__init__(f"stage {stage!r} failed: {cause}")
        self.stage = stage
        self.cause = cause
