"""Exception hierarchy."""


class QuantLabError(Exception):
    """Base class for all toolkit errors."""


class DimensionError(QuantLabError, ValueError):
    pass


class DomainError(QuantLabError, ValueError):
    pass


class ParameterError(QuantLabError, ValueError):
    pass


class DegenerateRangeError(QuantLabError, ValueError):
    pass


class GammaUndefinedError(QuantLabError, ValueError):
    pass


class InputError(QuantLabError, ValueError):
    pass


class TrainingDivergedError(QuantLabError, RuntimeError):
    def __init__(self, message, last_finite_step):
        super().__init__(message)
        self.last_finite_step = last_finite_step


class UnsupportedStructureError(QuantLabError, ValueError):
    pass


class SearchSpaceError(QuantLabError, ValueError):
    pass


class ModelIOError(QuantLabError):
    """Base class for container and calibration file errors."""


class FormatError(ModelIOError):
    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class ChecksumError(ModelIOError):
    pass


class VersionError(ModelIOError):
    pass
