"""Exception types shared across the package."""


class AmlabError(Exception):
    """Base class for all errors raised by amlab."""


class ConfigurationError(AmlabError, ValueError):
    """Invalid configuration, knob value or dataset role."""


class DimensionError(AmlabError, ValueError):
    """Shape or length mismatch between arrays."""


class FormatError(AmlabError, ValueError):
    """Malformed binary file. ``offset`` is the byte position of the problem."""

    def __init__(self, message: str, offset: int | None = None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class NotFoundError(AmlabError, KeyError):
    """Lookup of an unknown user, artifact or key."""

    def __str__(self) -> str:  # KeyError quotes its message otherwise
        return str(self.args[0]) if self.args else ""


class BudgetExhausted(AmlabError, RuntimeError):
    """The attacker's global query cap has been reached."""


class DivergenceError(AmlabError, ArithmeticError):
    """Training produced a non-finite loss or parameter."""
