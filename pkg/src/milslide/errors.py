"""Exception types shared across the package."""


class MilError(Exception):
    """Base class for all milslide errors."""


class ConfigError(MilError):
    """Invalid model or run configuration."""


class UsageError(MilError):
    """An API was called in a way its contract forbids."""


class ArgumentError(MilError):
    """Bad argument value (empty batch, bad sweep sizes, ...)."""


class DataError(MilError):
    """Malformed or inconsistent data files."""


class GenerationError(MilError):
    """Synthetic slide generation could not satisfy its contract."""


class EmptyBagError(DataError):
    """Every tile of a slide was rejected as background."""


class NumericError(MilError):
    """Non-finite values appeared during numeric computation."""


class MetricError(MilError):
    """A metric is undefined for the given inputs (e.g. one class absent)."""


class DegenerateDataError(MilError):
    """Input data carries no usable variance."""
