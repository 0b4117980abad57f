"""Exception types shared across the package."""


class GS4DError(Exception):
    """Base class for all package-specific errors."""


class DegenerateRotationError(GS4DError, ValueError):
    """Quaternion with (near-)zero norm cannot define a rotation."""


class BehindCameraError(GS4DError, ValueError):
    """Point at or behind the near plane has no pinhole Jacobian."""


class ShapeError(GS4DError, ValueError):
    """Array dimensions inconsistent with the declared layout."""


class InconsistentStateError(GS4DError, ValueError):
    """Backward pass invoked with a scene that does not match its forward pass."""


class ParameterError(GS4DError, ValueError):
    """Scalar argument outside its documented range."""


# --- stream codec ---

class CodecError(GS4DError, ValueError):
    """Base class for chunk-stream parsing failures."""


class BadMagicError(CodecError):
    pass


class VersionMismatchError(CodecError):
    pass


class ChecksumError(CodecError):
    pass


class TruncatedChunkError(CodecError):
    pass


class ProtocolError(CodecError):
    """Payload kind inconsistent with chunk index."""


class MissingChunkError(CodecError):
    """Continual reconstruction requires every chunk up to k."""


# --- datasets ---

class DatasetError(GS4DError, ValueError):
    pass


class MissingPosesError(DatasetError):
    pass


class NonRigidRotationError(DatasetError):
    pass


class RaggedFrameCountError(DatasetError):
    pass
