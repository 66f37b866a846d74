"""Exception types shared across the package."""


class DataError(ValueError):
    """A dataset or training set violates a structural requirement."""


class ConfigError(ValueError):
    """Invalid run configuration, bad file reference, or unknown style label."""


class ModelFormatError(ValueError):
    """A model file is corrupt, truncated, or of an unknown version."""


class DimensionError(ValueError):
    """Query dimensions do not match a fitted model."""


class NumericalError(RuntimeError):
    """A linear solve failed or violated its residual contract."""
