"""Exception hierarchy shared by every palmseg module."""


class PalmSegError(Exception):
    """Base class for all errors raised by palmseg."""


class DimensionError(PalmSegError, ValueError):
    """Tensor or image extents are incompatible with an operation."""


class ConfigError(PalmSegError, ValueError):
    """A configuration value is out of range or inconsistent."""


class ContractError(PalmSegError, ValueError):
    """An input violates an operation precondition (e.g. a non-binary mask)."""


class GradCheckError(PalmSegError):
    """The gradient checker met a non-finite function value."""


class TrainingError(PalmSegError):
    """Training hit a non-finite loss or gradient."""


class DataError(PalmSegError):
    """A dataset on disk is empty, malformed or unreadable."""


class CheckpointError(PalmSegError):
    """Base class for checkpoint read failures."""


class CorruptHeaderError(CheckpointError):
    pass


class ShapeMismatchError(CheckpointError):
    pass


class TruncatedFileError(CheckpointError):
    pass
