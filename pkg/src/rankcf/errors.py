"""Exception and warning types shared across the package."""


class RankcfError(Exception):
    """Base class for all package errors."""


class SchemaError(RankcfError):
    """A required column is missing or the file layout is wrong."""


class ParseError(RankcfError):
    """A cell could not be parsed as a number."""


class ValidationError(RankcfError):
    """An input violates a documented invariant."""


class AlignmentError(RankcfError):
    """Two containers that must be aligned have mismatched lengths."""


class DegenerateInputError(RankcfError):
    """The statistic is undefined on this input (e.g. all values tied)."""


class CoverageError(RankcfError):
    """Kernel support misses the data: every weight at the query is zero."""


class SeparationWarning(UserWarning):
    """Logistic fit hit the norm cap, indicating (quasi-)separation."""


class ConfigurationWarning(UserWarning):
    """A configuration is usable but probably not what was intended."""


class CoverageWarning(UserWarning):
    """An evaluation cell was empty and contributed zero to a metric."""
