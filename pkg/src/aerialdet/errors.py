"""Exception types shared across the package."""


class AerialDetError(Exception):
    """Base class for every error raised by aerialdet."""


class DimensionError(AerialDetError, ValueError):
    """Array shapes or sizes do not agree."""


class ConfigError(AerialDetError, ValueError):
    """A configuration value or precondition is invalid."""


class FormatError(AerialDetError, ValueError):
    """A file on disk does not follow its documented layout."""


class NumericError(AerialDetError, ArithmeticError):
    """A numerical routine could not produce a finite result."""


class StateError(AerialDetError, RuntimeError):
    """An object was used before it was ready (e.g. an untrained model)."""
