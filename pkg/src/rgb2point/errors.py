"""Exception types raised across the package."""


class Rgb2PointError(Exception):
    """Base class for all package errors."""


class MalformedRecordError(Rgb2PointError, ValueError):
    """A file record could not be parsed; message names the offending line or element."""


class EmptyCloudError(Rgb2PointError, ValueError):
    pass


class DegenerateMeshError(Rgb2PointError, ValueError):
    pass


class CardinalityMismatchError(Rgb2PointError, ValueError):
    pass


class SolverInfeasibleError(Rgb2PointError, RuntimeError):
    pass


class ResolutionMismatchError(Rgb2PointError, ValueError):
    pass


class WidthMismatchError(Rgb2PointError, ValueError):
    pass


class InputShapeError(Rgb2PointError, ValueError):
    pass


class MissingWeightsError(Rgb2PointError, FileNotFoundError):
    pass


class CheckpointError(Rgb2PointError):
    """Checkpoint archive is unreadable or carries the wrong format tag."""


class VersionMismatchError(CheckpointError):
    pass


class NonFiniteLossError(Rgb2PointError, FloatingPointError):
    pass


class ManifestError(Rgb2PointError, ValueError):
    pass


class MissingFileError(ManifestError, FileNotFoundError):
    pass


class UnknownCategoryError(ManifestError):
    pass


class DuplicateIdError(ManifestError):
    pass


class InsufficientPointsError(Rgb2PointError, ValueError):
    pass


class ImageReadError(Rgb2PointError, OSError):
    pass
