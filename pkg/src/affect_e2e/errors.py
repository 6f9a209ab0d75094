"""Exception hierarchy shared by every module in the package."""


class AffectError(Exception):
    """Base class for all package errors."""


class DimensionError(AffectError, ValueError):
    """Tensor shapes are incompatible with an operation."""


class ParameterError(AffectError, ValueError):
    """An operation parameter is outside its valid range."""


class ConfigurationError(AffectError, ValueError):
    """A configuration object violates one of its invariants."""


class DegenerateInputError(AffectError, ValueError):
    """Input has zero variance (or similar) where a statistic needs spread."""


class ContractError(AffectError, RuntimeError):
    """A calling contract was violated, e.g. backward on a non-scalar."""


class DataError(AffectError):
    """A data file is missing, malformed, or a split is empty.

    ``path`` and ``offset`` locate the problem when it comes from a file.
    """

    def __init__(self, message, path=None, offset=None):
        self.path = None if path is None else str(path)
        self.offset = offset
        where = ""
        if self.path is not None:
            where = f" [{self.path}"
            if offset is not None:
                where += f" @ byte {offset}"
            where += "]"
        super().__init__(message + where)
