"""Exception hierarchy shared by every module.

CLI exit codes are derived from these classes (see ``samdistill.cli``).
"""


class SamDistillError(Exception):
    """Base class for all package errors."""


class ContractError(SamDistillError, ValueError):
    """A precondition of a public operation was violated."""


class DimensionError(ContractError):
    """Tensor shapes are incompatible."""


class ConfigError(ContractError):
    """Invalid or inconsistent configuration."""


class DegenerateInputError(ContractError):
    """Input is well-formed but leaves the quantity undefined."""


class NonFiniteError(ContractError):
    """An operation produced NaN or Inf."""


class GenerationError(SamDistillError, RuntimeError):
    """Synthetic scene generation gave up."""


class FormatError(SamDistillError, IOError):
    """A binary or text file does not match its declared format."""
