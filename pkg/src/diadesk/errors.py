"""Exception types shared across the package."""


class DiaError(Exception):
    """Base class for every error raised by diadesk."""


class DimensionError(DiaError, ValueError):
    pass


class DegenerateInputError(DiaError, ValueError):
    """A norm-dependent computation received a (near) zero vector."""


class NonFiniteError(DiaError, FloatingPointError):
    pass


class UsageError(DiaError, ValueError):
    pass


class NumericError(DiaError, ArithmeticError):
    """An iterative kernel failed to converge."""

    def __init__(self, message: str, **diagnostics):
        super().__init__(message)
        self.diagnostics = diagnostics


class DatasetError(DiaError, ValueError):
    pass


class FormatError(DiaError, ValueError):
    def __init__(self, message: str, offset: int | None = None):
        super().__init__(message if offset is None else f"{message} (at byte offset {offset})")
        self.offset = offset


class ConfigError(DiaError, ValueError):
    def __init__(self, message: str, key: str | None = None):
        super().__init__(message if key is None else f"{key}: {message}")
        self.key = key


class TaskError(DiaError):
    """A pipeline stage failed; ``task`` names the incremental task."""

    def __init__(self, task: int, cause: BaseException):
        super().__init__(f"task {task}: {type(cause).__name__}: {cause}")
        self.task = task
