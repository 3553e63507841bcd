"""Exception types shared across the package."""


class MILError(Exception):
    """Base class for all package errors."""


class ConfigError(MILError, ValueError):
    """Invalid configuration; the message names the offending field."""


class ShapeError(MILError, ValueError):
    pass


class DataError(MILError, ValueError):
    pass


class DataIntegrityError(DataError):
    """A blob does not match what its manifest claims."""


class EvaluationError(MILError, ValueError):
    pass


class NumericalError(MILError, RuntimeError):
    """Training produced a non-finite value."""
