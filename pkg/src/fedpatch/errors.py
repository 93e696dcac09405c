"""Exception types shared across modules."""


class ConfigError(ValueError):
    """A configuration value is invalid or inconsistent.

    ``key`` names the offending config key when one is known.
    """

    def __init__(self, message: str, key: str | None = None):
        super().__init__(message)
        self.key = key


class DataError(ValueError):
    pass


class ParseError(DataError):
    def __init__(self, message: str, row: int | None = None, column: str | None = None):
        super().__init__(message)
        self.row = row
        self.column = column


class FormatError(DataError):
    pass


class EmptyWindowError(DataError):
    """The series is too short to host a single window."""


class DegenerateError(ArithmeticError):
    """A value is too close to zero to invert safely."""


class AggregationError(RuntimeError):
    pass
