"""Exception hierarchy shared by every module."""


class GlamorError(Exception):
    """Base class for all package errors."""


class ShapeError(GlamorError, ValueError):
    pass


class StateError(GlamorError, RuntimeError):
    """Raised when an operation is invoked out of order (e.g. backward before forward)."""


class InputError(GlamorError, ValueError):
    pass


class ConfigError(GlamorError, ValueError):
    pass


class FormatError(GlamorError, ValueError):
    """Malformed file contents. ``offset`` is the byte position where parsing failed."""

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class DegenerateTableError(GlamorError, ValueError):
    """The marginal-homogeneity covariance is singular."""

    def __init__(self, message, categories=()):
        super().__init__(message)
        self.categories = tuple(categories)
