"""Exception types shared across the package."""


class InvalidArgument(ValueError):
    """An argument violates a documented precondition."""


class ConfigError(ValueError):
    """An experiment config file is missing, malformed, or inconsistent."""


class ParseError(ValueError):
    """A point cloud file could not be parsed.

    Carries the 1-based line number of the offending line when known.
    """

    def __init__(self, message: str, line: int | None = None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class TrainingDiverged(RuntimeError):
    """A non-finite value appeared in the loss or gradients during training."""


class NumericalError(ArithmeticError):
    """A numerical routine produced a non-finite or otherwise unusable result."""


class InvalidModel(RuntimeError):
    """A model container is structurally inconsistent (shapes, kind, missing tensors)."""


class DegenerateFit(ValueError):
    """A regression has no unique solution for the given data."""
