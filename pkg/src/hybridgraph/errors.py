"""Exception types shared across the package."""


class HybridGraphError(Exception):
    """Base class for all package errors."""


class DimensionError(HybridGraphError, ValueError):
    """Operand shapes do not conform."""


class ConfigError(HybridGraphError, ValueError):
    """Invalid configuration value."""


class ValidationError(HybridGraphError, ValueError):
    """Input data violates a schema or range constraint."""


class ParseError(ValidationError):
    """A file could not be parsed; ``line`` carries the 1-based location."""

    def __init__(self, message, path=None, line=None):
        loc = ""
        if path is not None:
            loc = f"{path}"
            if line is not None:
                loc += f":{line}"
            loc += ": "
        super().__init__(loc + message)
        self.path = path
        self.line = line


class SchemaError(ValidationError):
    """Data is well-formed but does not match the expected schema."""


class UndefinedIoUError(HybridGraphError, ValueError):
    """IoU requested between two empty masks."""


class NumericError(HybridGraphError, ArithmeticError):
    """Non-finite value encountered (loss divergence, bad evaluation)."""
