"""Exception hierarchy shared by all modules.

The CLI maps these onto exit codes: ``ValidationError`` -> 3,
``CapacityError`` -> 4.
"""


class MetafolioError(Exception):
    """Base class for all library errors."""


class ValidationError(MetafolioError, ValueError):
    """Input data violates a documented invariant."""


class ParseError(ValidationError):
    """An input file does not follow its schema.

    ``field`` and ``index`` locate the offending record when known.
    """

    def __init__(self, message, field=None, index=None):
        where = []
        if index is not None:
            where.append(f"record {index}")
        if field is not None:
            where.append(f"field {field!r}")
        if where:
            message = f"{message} ({', '.join(where)})"
        super().__init__(message)
        self.field = field
        self.index = index


class CapacityError(MetafolioError):
    """A brute-force routine was asked to enumerate too many subsets."""


class NoResultYet(MetafolioError, LookupError):
    """A learning curve has no checkpoint at or below the requested budget."""
