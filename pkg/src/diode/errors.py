class DiodeError(Exception):
    """Base of every error raised on purpose by this package."""


class ConfigurationError(DiodeError, ValueError):
    """Shapes, names or settings that do not fit together."""


class UsageError(DiodeError, RuntimeError):
    """An operation called out of order or with a wrong kind of argument."""


class ProtocolError(DiodeError, ValueError):
    """Class partitions or annotation sets violating the incremental protocol."""


class GenerationError(DiodeError, RuntimeError):
    """Scene generation could not satisfy its constraints."""


class ExplosionError(DiodeError, FloatingPointError):
    """Raised when a loss or gradient becomes non-finite or too large."""

    def __init__(self, param: str, reason: str = "gradient explosion"):
        super().__init__(f"{reason} at {param}")
        self.param = param
        self.reason = reason
