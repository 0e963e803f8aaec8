"""Exception hierarchy shared by all modules."""


class MRAError(Exception):
    """Base class for every error raised by pymra."""


class ConfigError(MRAError):
    """Invalid user parameter or parameter combination."""

    def __init__(self, message, key=None, line=None):
        where = []
        if key is not None:
            where.append(f"key {key}")
        if line is not None:
            where.append(f"line {line}")
        if where:
            message = f"{message} ({', '.join(where)})"
        super().__init__(message)
        self.key = key
        self.line = line


class FormatError(MRAError):
    """A binary input file does not match its declared layout."""


class StructureError(MRAError):
    """The multi-resolution structure cannot be built or is inconsistent."""


class NumericalError(MRAError):
    """A factorization failed (matrix not positive definite)."""
