"""Exception hierarchy shared by every package in the editor."""


class SceneEditorError(Exception):
    """Base class for all editor errors."""


class InvalidArgumentError(SceneEditorError, ValueError):
    """An argument violates a documented precondition."""


class ShapeMismatchError(InvalidArgumentError):
    """Two arrays that must agree in shape do not."""


class NonFiniteError(SceneEditorError, FloatingPointError):
    """A NaN or infinity reached a place that must stay finite."""

    def __init__(self, message: str, index: int = None, group: str = None):
        super().__init__(message)
        self.index = index
        self.group = group


class SnapshotError(SceneEditorError):
    """Base class for snapshot/checkpoint container errors."""


class SnapshotFormatError(SnapshotError):
    """The file is not a container (bad magic or malformed header)."""


class SnapshotMissingError(SnapshotError):
    """The container file does not exist or cannot be read."""


class SnapshotVersionError(SnapshotError):
    """The container was written by an incompatible format version."""


class SnapshotChecksumError(SnapshotError):
    """A section failed its CRC32 check."""


class SnapshotTruncatedError(SnapshotChecksumError):
    """The file ended before all declared sections were read."""


class DatasetError(SceneEditorError):
    """Base class for dataset loading errors."""


class ManifestMissingError(DatasetError):
    pass


class MissingImageError(DatasetError):
    def __init__(self, path):
        super().__init__(f"Image referenced by manifest not found: {path}")
        self.path = path


class ImageSizeMismatchError(DatasetError):
    pass


class TimestampOrderError(DatasetError):
    pass


class DegenerateDatasetError(DatasetError):
    pass


class FrustumError(SceneEditorError):
    """A synthetic object leaves the camera frustum."""


class ConfigError(SceneEditorError):
    """A run configuration failed validation."""


class OracleError(SceneEditorError):
    """An edit oracle failed on a frame."""


class KeyframeError(SceneEditorError):
    """The keyframe does not refer to a frame of the dataset."""
