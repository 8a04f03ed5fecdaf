"""Exception types shared across the package."""


class GeoEditError(Exception):
    """Base class for all package-specific errors."""


class ShapeMismatchError(GeoEditError):
    """Operands have incompatible shapes or strides."""


class DegeneratePitchError(GeoEditError):
    """Pitch too close to +-pi/2; the look-at frame is undefined there."""


class NotARotationError(GeoEditError):
    """Matrix failed the orthonormality / determinant check."""


class BehindCameraError(GeoEditError):
    """Point is at or behind the camera plane; projection undefined."""


class BadParamsError(GeoEditError):
    """Invalid construction parameters (dimensions, subdivisions, ...)."""


class BadRangesError(GeoEditError):
    """Sampling ranges violate camera invariants."""


class CameraInsideObjectError(GeoEditError):
    """Camera distance does not clear the mesh bounding sphere."""


class EmptyTargetError(GeoEditError):
    """Target silhouette contains no foreground pixels."""


class MissingBackgroundError(GeoEditError):
    """Auxiliary-task conditioning requested without a background plate."""


class NonFiniteError(GeoEditError):
    """A NaN or infinity appeared where finite values are required."""


class MissingOutputError(GeoEditError):
    """An expected generated output file is absent."""


class IncompatibleCheckpointError(GeoEditError):
    """Checkpoint magic or version does not match this build."""
