"""Exception types shared across the package."""


class ShapeError(ValueError):
    """Operand shapes violate an operation's contract."""


class GraphError(RuntimeError):
    """Autodiff contract violation: non-scalar loss, missing gradients, ..."""


class ConfigError(ValueError):
    """Invalid or inconsistent configuration."""


class NumericalError(RuntimeError):
    """Training diverged or produced non-finite values."""


class DatasetFormatError(ValueError):
    """A dataset file could not be parsed."""

    def __init__(self, message, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line
