"""Exception types shared across the package."""


class ArgumentError(ValueError):
    """An argument violates an operation's precondition."""


class StateError(RuntimeError):
    """An object is in the wrong state for the requested operation."""


class CorruptFileError(IOError):
    """A file on disk does not match its own header."""


class UndefinedMetricError(ValueError):
    """A metric is mathematically undefined for the given labels."""


class TrainingDivergenceError(RuntimeError):
    """A non-finite loss was produced during training.

    The ``diagnostics`` attribute carries the loss parts, the step index and the
    learning rate at the time of failure.
    """

    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}


class ContractViolationError(RuntimeError):
    """A component broke a guarantee it is supposed to uphold."""


class CheckpointMismatchError(RuntimeError):
    """A checkpoint manifest does not match the requesting configuration."""


class ConfigError(ValueError):
    """A config file failed to parse; ``line`` is 1-based when known."""

    def __init__(self, message, line=None, path=None):
        self.line = line
        self.path = path
        where = ""
        if path is not None:
            where = f"{path}:"
        if line is not None:
            where += f"{line}: "
        elif where:
            where += " "
        super().__init__(f"{where}{message}")
