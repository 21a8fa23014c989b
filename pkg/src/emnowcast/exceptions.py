"""Exception hierarchy.

The CLI maps each family to an exit code: configuration problems exit with 2,
data problems with 3 and numerical failures with 4.
"""


class NowcastError(Exception):
    """Base class for all package errors."""

    exit_code = 1


class ConfigError(NowcastError, ValueError):
    exit_code = 2


class DataError(NowcastError, ValueError):
    exit_code = 3


class InvalidRecordError(DataError):
    pass


class SchemaError(DataError):
    pass


class ContractError(DataError):
    """Inputs violate a documented precondition (shapes, simplex, sizes)."""


class NumericalError(NowcastError, ArithmeticError):
    exit_code = 4


class DomainError(NumericalError):
    """A value lies outside the domain of a log or likelihood term."""


class ConvergenceError(NumericalError):
    pass


class DivergenceError(NumericalError):
    """A learner produced non-finite scores during the EM loop."""
