"""Exception types shared across the package."""


class CfmError(Exception):
    """Base class for package errors."""


class ShapeError(CfmError):
    """An array argument has an incompatible shape."""


class StateError(CfmError):
    """An operation was called in an invalid order (e.g. double backward)."""


class ConfigError(CfmError):
    """A configuration value or combination is invalid."""


class DataFormatError(CfmError):
    """A serialized file is malformed or version-incompatible."""


class GenerationError(CfmError):
    """Sampling produced an invalid state (non-finite values)."""
