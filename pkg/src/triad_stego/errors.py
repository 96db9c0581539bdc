class StegoError(Exception):
    """Base class for all package errors."""


class ConfigurationError(StegoError, ValueError):
    pass


class CapacityError(StegoError, ValueError):
    pass


class UnsupportedFormatError(StegoError, ValueError):
    pass


class CorruptFileError(StegoError, ValueError):
    pass


class NonFiniteError(StegoError, FloatingPointError):
    pass


class CheckpointError(StegoError, ValueError):
    pass
