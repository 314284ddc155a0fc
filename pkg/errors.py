"""
Error Types
Every explicit failure in the pipeline raises one of these
"""


class SplatError(Exception):
    """Base class for all pipeline errors"""


class GeometryError(SplatError):
    """Degenerate camera geometry (coincident centers, zero-norm axes, bad intrinsics)"""


class ShapeError(SplatError, ValueError):
    """Incompatible array shapes"""

    def __init__(self, op: str, *shapes):
        self.op = op
        self.shapes = shapes
        joined = " vs ".join(str(tuple(s)) for s in shapes)
        super().__init__(f"{op}: incompatible shapes {joined}")


class NonFiniteError(SplatError):
    """NaN or Inf encountered where finite values are required"""


class ConfigError(SplatError):
    """Malformed or unknown configuration"""


class CheckpointError(SplatError):
    """Unreadable, truncated or mismatched checkpoint file"""


class PlyFormatError(SplatError):
    """Malformed splat asset"""


class DatasetError(SplatError):
    """Missing or inconsistent posed-image data"""


class TrainingError(SplatError):
    """Training aborted"""

    def __init__(self, message: str, step: int = -1, terms: dict = None):
        self.step = step
        self.terms = terms or {}
        if terms:
            breakdown = ", ".join(f"{k}={v:.6g}" for k, v in terms.items())
            message = f"{message} (step {step}: {breakdown})"
        super().__init__(message)
