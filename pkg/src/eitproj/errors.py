"""Exception hierarchy shared across the package.

The CLI maps ``ConfigError`` (and its subclasses) to exit code 2 and
``NumericError`` to exit code 3.
"""


class EITError(Exception):
    """Base class for all package errors."""


class ConfigError(EITError, ValueError):
    """Invalid user-supplied configuration (geometry, patterns, parameters)."""


class MeshParseError(ConfigError):
    """Mesh document could not be parsed."""


class ValidationError(ConfigError):
    """A mesh or layout violates one of its invariants."""


class ContractError(ConfigError):
    """Arguments are individually valid but mutually inconsistent."""


class DomainError(EITError, ValueError):
    """Argument lies outside the mathematical domain of an operation."""


class NumericError(EITError, RuntimeError):
    """Factorization, solver or eigen-solver failure."""


class ResourceError(EITError, RuntimeError):
    """Requested problem exceeds a configured size budget."""
