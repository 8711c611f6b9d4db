"""Exception taxonomy shared across the package.

Kept in one module so the CLI can map exception classes to exit codes
without importing everything else.
"""


class FettlError(Exception):
    """Base class for all package errors."""


class DimensionError(FettlError, ValueError):
    """Shapes are incompatible for the requested operation."""


class InvalidInputError(FettlError, ValueError):
    """Input values violate an operation's preconditions."""


class ContractError(FettlError, RuntimeError):
    """An API contract was violated (non-scalar loss, missing gradient, ...)."""


class AggregationError(FettlError, RuntimeError):
    """Federated uploads disagree on parameter names or shapes."""


class ConfigError(FettlError, ValueError):
    """Experiment configuration failed validation."""


class NumericError(FettlError, RuntimeError):
    """A non-finite value appeared where the protocol requires finiteness."""
