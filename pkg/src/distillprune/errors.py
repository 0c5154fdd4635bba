"""Exception types shared across the package."""


class ConfigError(ValueError):
    """A configuration value violates its contract."""


class StructureError(ValueError):
    """Two structures that must agree (model vs. mask, head vs. features) do not."""


class InputError(ValueError):
    """An input batch does not match the model's input contract."""


class NumericError(ArithmeticError):
    """A computation produced or received non-finite values."""


class IngestionError(RuntimeError):
    """A dataset file is missing, corrupt, or lacks required columns."""
