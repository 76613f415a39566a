"""Exception hierarchy. Every error raised on purpose derives from ClipGrainError."""


class ClipGrainError(Exception):
    pass


class InvalidInputError(ClipGrainError, ValueError):
    """Non-finite or otherwise malformed numeric input."""


class DimensionError(ClipGrainError, ValueError):
    pass


class OracleFailureError(ClipGrainError, ArithmeticError):
    """The finite-difference oracle hit a non-finite loss value."""


class ConfigError(ClipGrainError, ValueError):
    """Invalid configuration. ``path`` names the offending field when known."""

    def __init__(self, message: str, path: str | None = None):
        self.path = path
        super().__init__(f"{path}: {message}" if path else message)


class ContractError(ClipGrainError, ValueError):
    """A caller broke a documented precondition (e.g. missing per-example grads)."""


class TrainingAbort(ClipGrainError, RuntimeError):
    """Training stopped because a gradient went non-finite."""

    def __init__(self, message: str, step: int | None = None, core: int | None = None,
                 policy: str | None = None):
        self.step = step
        self.core = core
        self.policy = policy
        super().__init__(message)


class DatasetFormatError(ClipGrainError, ValueError):
    pass
