"""Exception hierarchy shared by every module of the package."""


class SaliencyError(Exception):
    """Base class for all package errors."""


class ShapeMismatch(SaliencyError, ValueError):
    pass


class InvalidModel(SaliencyError, ValueError):
    pass


class InvalidConfig(SaliencyError, ValueError):
    pass


class IndexOutOfRange(SaliencyError, IndexError):
    pass


class UnknownLayer(SaliencyError, KeyError):
    def __str__(self):
        return str(self.args[0]) if self.args else "unknown layer"


class TraceMismatch(SaliencyError, ValueError):
    pass


class DataError(SaliencyError):
    pass


class IoError(SaliencyError, OSError):
    pass


class FormatError(DataError, ValueError):
    """Malformed binary input; ``offset`` is the byte position of the fault."""

    def __init__(self, message, offset=None):
        self.offset = offset
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)


class DegenerateMap(SaliencyError, ValueError):
    pass


class NoFixations(SaliencyError, ValueError):
    pass
