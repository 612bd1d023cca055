"""Exception types shared across the package."""


class EvotetError(Exception):
    """Base class for all package errors."""


class ConfigurationError(EvotetError):
    """A config value is structurally invalid (maps to CLI exit code 2)."""


class ContractError(EvotetError):
    """An operation was called with arguments violating its preconditions."""


class NumericError(EvotetError):
    """NaN/Inf or divergence detected (maps to CLI exit code 3)."""


class AssetIOError(EvotetError):
    """File import/export failure (maps to CLI exit code 4)."""
