"""Exception types shared across the toolkit."""


class SegGroupError(Exception):
    """Base class for all toolkit errors."""


class ConfigError(SegGroupError):
    """Invalid configuration, CLI usage, or incompatible component wiring."""


class DataError(SegGroupError):
    """Unreadable, inconsistent, or out-of-contract input data."""


class TensorFormatError(DataError):
    """Malformed or corrupt tensor-container file."""
