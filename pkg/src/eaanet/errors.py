"""Exception types shared across the package."""


class ShapeMismatchError(ValueError):
    """Operands have incompatible shapes."""


class ConfigurationError(ValueError):
    """A spec/config value is illegal or inconsistent."""


class ContractError(RuntimeError):
    """An operation was called outside its contract."""


class FullyMaskedRowError(ValueError):
    """A softmax row had every position masked out."""


class DivergedError(RuntimeError):
    """Training produced NaN loss or gradients."""


class DataFormatError(ValueError):
    """An input file does not match the expected binary layout."""
