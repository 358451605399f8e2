"""Exception types shared across the package."""


class MomoeError(Exception):
    """Base class for all package errors."""


class ShapeError(MomoeError, ValueError):
    """Operand dimensions do not line up."""


class ConfigError(MomoeError, ValueError):
    """A configuration value is out of range or inconsistent.

    ``field`` names the offending setting when known so the CLI can report it.
    """

    def __init__(self, message: str, field: str | None = None):
        super().__init__(message)
        self.field = field


class InputError(MomoeError, ValueError):
    """Bad runtime input (too-long sequence, empty loss support, bad corpus line...)."""


class ContractError(MomoeError, RuntimeError):
    """A cache or record was used against state it was not produced from."""


class TrainingError(MomoeError, RuntimeError):
    """Training diverged (non-finite loss)."""


class AggregationError(MomoeError, RuntimeError):
    """The mixture-of-agents pipeline could not produce a decision."""
