"""Exception hierarchy shared by the library and the CLI scripts.

Every class also derives from a builtin exception, so callers that only know
about ``ValueError`` / ``ArithmeticError`` keep working.
"""


class LeverShapError(Exception):
    """Base class for all errors raised by this package."""


# ── exit code 2 ──────────────────────────────────────────────────────────────

class ConfigError(LeverShapError, ValueError):
    """Invalid configuration or command-line input."""


class SchemaError(ConfigError):
    """Feature spaces, dimensions or names do not line up."""


class LoadError(ConfigError):
    """A model/ordering file could not be parsed against its schema."""


class ComparisonError(ConfigError):
    """Two reports cannot be compared."""


class EnumerationLimitError(ConfigError):
    """Exact enumeration requested for too many features."""


class DomainError(LeverShapError, ValueError):
    """Argument outside the mathematical domain of an operation."""


# ── exit code 3 ──────────────────────────────────────────────────────────────

class DataError(LeverShapError, ValueError):
    """Background data or episode data is unusable."""


# ── exit code 4 ──────────────────────────────────────────────────────────────

class NumericError(LeverShapError, ArithmeticError):
    """A linear-algebra step failed (singular or indefinite matrix)."""


class EstimationError(NumericError):
    """The kernel regression is not identifiable."""


EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4


def exit_code_for(exc: BaseException) -> int:
    if isinstance(exc, DataError):
        return EXIT_DATA
    if isinstance(exc, NumericError):
        return EXIT_NUMERIC
    if isinstance(exc, (ConfigError, DomainError, FileNotFoundError)):
        return EXIT_CONFIG
    raise exc
