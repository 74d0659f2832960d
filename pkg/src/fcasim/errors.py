"""Exception hierarchy shared by every module."""


class FCAError(Exception):
    pass


class ConfigError(FCAError, ValueError):
    """Invalid configuration or inconsistent shapes at construction time."""

    def __init__(self, message: str, field: str | None = None):
        self.field = field
        super().__init__(f"{field}: {message}" if field else message)


class ValidationError(FCAError, ValueError):
    """An argument violates an operation's precondition."""


class StateError(FCAError, RuntimeError):
    """An operation was invoked in the wrong lifecycle state."""


class ProtocolError(FCAError, RuntimeError):
    """Round messages are missing, duplicated, or out of sync."""


class NumericalError(FCAError, FloatingPointError):
    """A NaN or infinite value appeared in a loss or gradient."""
