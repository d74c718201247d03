class TDRLError(Exception):
    """Base class of all errors raised by `tdrl`.

    Every subclass carries the process exit code the command line interface
    maps it to (see `tdrl.cli`).
    """

    exit_code = 1

    def __init__(self, message, **context):
        super().__init__(message)
        self.message = message
        self.context = context

    def __str__(self):
        if not self.context:
            return self.message
        details = ", ".join(f"{key}={value!r}" for key, value in self.context.items())
        return f"{self.message} ({details})"


class ConfigError(TDRLError):
    """Raised for invalid or missing configuration fields."""

    exit_code = 2

    def __init__(self, message, field=None, **context):
        if field is not None:
            context = {"field": field, **context}
        super().__init__(message, **context)
        self.field = field


class SpecError(ConfigError):
    """Raised when a `GeneratorSpec` (or a model partition) is inconsistent."""


class ParameterError(ConfigError, ValueError):
    """Raised for numeric parameters outside their admissible range."""


class DataError(TDRLError, ValueError):
    """Raised for insufficient, degenerate or mis-shaped data."""

    exit_code = 2


class ArtifactError(TDRLError, OSError):
    """Raised when an artifact on disk is missing, corrupt or inconsistent with
    its manifest."""

    exit_code = 3


class NumericalError(TDRLError, ArithmeticError):
    """Raised for non-finite values and failed numerical solves.

    The message names the offending quantity (loss term, evaluation point, layer).
    """

    exit_code = 4


class DomainError(DataError, IndexError):
    """Raised for a domain index outside `[0, num_domains)`."""
