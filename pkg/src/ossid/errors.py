"""Exception types shared across the package.

Each class carries a stable ``code`` string that also prefixes the message, so
callers (and the CLI) can match on codes without importing every class.
"""


class OssidError(Exception):
    """Base class; ``code`` is a stable kebab-case identifier."""
    code = "error"

    def __init__(self, detail=""):
        msg = self.code if not detail else f"{self.code}: {detail}"
        super().__init__(msg)


class PointBehindCamera(OssidError):
    code = "point-behind-camera"


class BehindCamera(OssidError):
    code = "behind-camera"


class DegeneratePair(OssidError):
    code = "degenerate-pair"


class TooFewPoints(OssidError):
    code = "too-few-points"


class NoScenePoints(OssidError):
    code = "no-scene-points"


class CalibrationFailure(OssidError):
    code = "calibration-failure"


class PlacementFailure(OssidError):
    code = "placement-failure"


class MalformedFile(OssidError):
    code = "malformed-file"


class ShapeMismatch(OssidError):
    code = "shape-mismatch"


class NoGroundTruth(OssidError):
    code = "no-ground-truth"


class SchemaMismatch(OssidError):
    code = "schema-mismatch"


class EmptyPseudoLabelSet(OssidError):
    code = "empty-pseudo-label-set"


class EmptyWindow(OssidError):
    code = "empty-window"
