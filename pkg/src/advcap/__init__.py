"""Diverse caption-set generation with adversarial training and set-level discrimination."""
from .errors import (AdvcapError, ConfigError, ContractError, DataError, IntegrityError,
                     NumericalError, ParameterError, PreconditionError, SchemaError)

__version__ = "0.1.0"

__all__ = [
    "AdvcapError", "ConfigError", "ContractError", "DataError", "IntegrityError",
    "NumericalError", "ParameterError", "PreconditionError", "SchemaError", "__version__",
]
