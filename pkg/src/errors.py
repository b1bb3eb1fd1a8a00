"""Error types shared across the simulator, with a machine-readable envelope."""

from typing import Any


class CoopSimError(Exception):
    """Base error carrying a stable code and structured context."""

    code = "error"

    def __init__(self, message: str, **context: Any):
        super().__init__(message)
        self.message = message
        self.context = context

    def to_dict(self) -> dict:
        """Serialize to the {code, message, context} envelope."""
        return {
            "code": self.code,
            "message": self.message,
            "context": {k: _jsonable(v) for k, v in self.context.items()},
        }


class ParameterError(CoopSimError, ValueError):
    """Invalid argument value or shape."""

    code = "parameter_error"


class ConfigError(CoopSimError, ValueError):
    """Malformed scenario or experiment configuration."""

    code = "config_error"


class FormatError(CoopSimError, ValueError):
    """Unreadable or inconsistent file content."""

    code = "format_error"


class NumericalError(CoopSimError, ArithmeticError):
    """Singular matrices, non-finite values and similar numerical failures."""

    code = "numerical_error"


class DivergenceError(NumericalError):
    """Optimization produced a non-finite objective."""

    code = "divergence"


def _jsonable(value: Any) -> Any:
    if isinstance(value, (str, int, float, bool)) or value is None:
        return value
    if isinstance(value, (list, tuple)):
        return [_jsonable(v) for v in value]
    if isinstance(value, dict):
        return {str(k): _jsonable(v) for k, v in value.items()}
    # numpy scalars and anything else
    try:
        return float(value)
    except (TypeError, ValueError):
        return str(value)
