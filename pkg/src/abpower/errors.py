"""Exception hierarchy.

Errors split into two families so the CLI can map them to exit codes:
``ConfigError`` (bad flags, schema, malformed specs; exit 2) and
``DataError`` (the data cannot support the requested computation; exit 3).
"""


class AbpowerError(Exception):
    pass


class DomainError(AbpowerError, ValueError):
    """An argument lies outside the domain of a function."""


class ConfigError(AbpowerError, ValueError):
    pass


class SchemaError(ConfigError):
    pass


class SpecError(ConfigError):
    """A power specification is under- or over-determined."""


class DataError(AbpowerError, ValueError):
    pass


class EmptyInputError(DataError):
    pass


class RowError(DataError):
    def __init__(self, line: int, message: str):
        super().__init__(f"line {line}: {message}")
        self.line = line


class InsufficientDataError(DataError):
    pass


class InconsistentAssignmentError(DataError):
    pass


class CollinearityError(DataError):
    def __init__(self, column: int, message: str | None = None):
        super().__init__(message or f"covariate column {column} is collinear with earlier columns")
        self.column = column


class DegenerateDenominatorError(DataError):
    pass


class DesignError(DataError):
    pass


class IncompatibleArmsError(DataError):
    pass


class UndefinedSkewnessError(DataError):
    pass


class HarnessError(AbpowerError):
    """Too many replications failed inside a Monte Carlo run."""
