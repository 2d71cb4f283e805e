"""Exception hierarchy. CLI exit codes hang off ``exit_code``."""


class AdvcapError(Exception):
    exit_code = 1


class ConfigError(AdvcapError, ValueError):
    """Bad configuration, dimension mismatch or invalid hyperparameter."""

    exit_code = 2


class ParameterError(ConfigError):
    pass


class PreconditionError(AdvcapError):
    """A required input (checkpoint, dataset) is missing."""

    exit_code = 2


class ContractError(AdvcapError, ValueError):
    """A caller broke an operation's precondition."""

    exit_code = 2


class DataError(AdvcapError, ValueError):
    exit_code = 3


class SchemaError(DataError):
    pass


class IntegrityError(DataError):
    pass


class NumericalError(AdvcapError, ArithmeticError):
    exit_code = 4


class OracleError(AdvcapError):
    """The finite-difference oracle saw a non-deterministic function."""
