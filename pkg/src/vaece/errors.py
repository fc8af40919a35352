"""Exception types raised across the package."""


class VaeceError(Exception):
    """Base class for all package errors."""


class DimensionError(VaeceError, ValueError):
    pass


class InvalidInputError(VaeceError, ValueError):
    pass


class SingularSystemError(VaeceError, ArithmeticError):
    pass


class InvalidAngleError(InvalidInputError):
    pass


class InfeasibleConstraintError(VaeceError, ValueError):
    pass


class ConfigError(VaeceError, ValueError):
    pass


class DegenerateSampleError(VaeceError, ValueError):
    pass


class FormatError(VaeceError):
    """Malformed binary file. ``offset`` is the byte position where parsing failed."""

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class UnsupportedVersionError(FormatError):
    pass


class CheckpointError(FormatError):
    pass


class NumericalError(VaeceError, ArithmeticError):
    """Non-finite value encountered. ``term`` names the offending quantity."""

    def __init__(self, message, term=None):
        super().__init__(message)
        self.term = term


class TrainingError(NumericalError):
    def __init__(self, message, epoch=None, term=None):
        super().__init__(message, term=term)
        self.epoch = epoch


class FittingError(NumericalError):
    pass
