"""Exception types shared across the package."""


class AdaPropError(Exception):
    """Base class for all package errors."""


class ParseError(AdaPropError, ValueError):
    """A data file line could not be parsed."""

    def __init__(self, path, line_no, message):
        self.path = str(path)
        self.line_no = line_no
        super().__init__(f"{path}:{line_no}: {message}")


class VocabError(AdaPropError, KeyError):
    """A name is missing from a fixed vocabulary."""

    def __str__(self):
        return str(self.args[0]) if self.args else ""


class DimensionError(AdaPropError, ValueError):
    """Operand shapes are incompatible."""


class NumericError(AdaPropError, ArithmeticError):
    """A computation produced NaN or Inf."""


class ContractError(AdaPropError, ValueError):
    """A documented precondition was violated."""


class ConfigError(AdaPropError, ValueError):
    """An invalid or unknown configuration value."""


class CheckpointError(AdaPropError, IOError):
    """A checkpoint file is missing, corrupted or incompatible."""
