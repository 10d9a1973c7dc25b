class ConfigError(ValueError):
    """Invalid algorithm, task mode, quantizer name or experiment setting."""


class DivergenceError(RuntimeError):
    """Training produced a non-finite loss or gradient."""

    def __init__(self, message: str, step: int | None = None):
        super().__init__(message)
        self.step = step


class FormatError(ValueError):
    """A data or model file does not match its declared binary format."""
