"""Exception types shared across the toolkit."""


class PosekitError(Exception):
    """Base class for all toolkit errors."""


class MeshFormatError(PosekitError):
    """Mesh file is malformed or in an unsupported format."""


class DegenerateGeometryError(PosekitError):
    """Input geometry admits no valid answer (e.g. all points coplanar-degenerate,
    zero-area mesh, object entirely behind the camera)."""


class ObjectBehindCameraError(DegenerateGeometryError):
    """Every mesh vertex has non-positive camera-frame depth; nothing to render."""


class NoConsensusError(PosekitError):
    """Robust estimation finished without finding a sufficient inlier set."""


class InsufficientDataError(PosekitError):
    """Not enough samples to satisfy a request (e.g. empty anchor/negative pool,
    fewer correspondences than the solver's minimum)."""


class CheckpointFormatError(PosekitError):
    """Serialized weights or descriptor stack failed validation."""


class ResultFormatError(PosekitError):
    """A result table (or other evaluation input) is malformed."""


class NumericalError(PosekitError):
    """A computation left the numerically trustworthy regime."""


class ShapeMismatchError(PosekitError):
    """Tensor/array arguments have inconsistent shapes for the requested op."""
