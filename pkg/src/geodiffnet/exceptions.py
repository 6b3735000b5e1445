"""Exception hierarchy. Each family maps to a CLI exit code."""


class GeoDiffError(Exception):
    exit_code = 1


class ConfigError(GeoDiffError, ValueError):
    """Invalid configuration or parameter value."""

    exit_code = 2


class DimensionError(ConfigError):
    """Array shapes do not agree."""


class StateError(GeoDiffError, RuntimeError):
    """An operation was called in the wrong state (e.g. backward before forward)."""

    exit_code = 2


class DataError(GeoDiffError):
    exit_code = 3


class FormatError(DataError):
    """Malformed binary file. ``offset`` is the byte offset of the problem, if known."""

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class DegenerateLabelError(DataError):
    pass


class AlignmentError(DataError):
    pass


class DivergenceError(GeoDiffError, ArithmeticError):
    exit_code = 4

    def __init__(self, message, iteration=None):
        if iteration is not None:
            message = f"{message} at iteration {iteration}"
        super().__init__(message)
        self.iteration = iteration
