"""Exception hierarchy shared by all distinctnet modules."""


class DistinctNetError(Exception):
    """Base class for all errors raised by this package."""


class DimensionError(DistinctNetError):
    """Shapes of tensor arguments are inconsistent with the operation."""


class ConfigError(DistinctNetError):
    """A configuration value is invalid or internally inconsistent."""


class DataError(DistinctNetError):
    """Input data violates a documented precondition (bad labels, ...)."""


class TrainingError(DistinctNetError):
    """Training cannot proceed (missing gradient, NaN loss, ...)."""


class UsageError(DistinctNetError):
    """An API was called in a way its contract forbids."""


class StateError(DistinctNetError):
    """A recurrent state does not match the model that is consuming it."""


class ManifestError(DistinctNetError):
    """A dataset manifest references files that are missing or malformed."""


class HarvestError(DistinctNetError):
    """Mask harvesting produced no usable foreground."""
