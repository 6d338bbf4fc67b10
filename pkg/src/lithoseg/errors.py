"""Exception types raised across the package."""


class LithosegError(Exception):
    """Base class for all package errors."""


class ConfigError(LithosegError, ValueError):
    """Invalid configuration value or combination."""


class DatasetError(LithosegError):
    """A clip directory is missing files or cannot be decoded."""

    def __init__(self, clip_id: str, message: str):
        super().__init__(f"clip {clip_id!r}: {message}")
        self.clip_id = clip_id


class MaskValueError(DatasetError):
    """A mask holds a label outside {0, 1, 2}."""


class ShapeError(LithosegError, ValueError):
    """Input tensors or images have incompatible shapes."""


class BundleError(LithosegError):
    """Checkpoint file cannot be used."""


class BundleVersionError(BundleError):
    pass


class BundleCorruptError(BundleError):
    pass
