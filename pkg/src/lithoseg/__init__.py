"""Multi-class segmentation of stones and laser fibre in endoscopic video.

Subpackages and modules
    data      clip container, disk layout, synthetic generator, augmentation
    segnet    configurable U-Net family (residual, recurrent, attention, ASPP)
    dvfnet    unsupervised registration network, warping and spline resampling
    losses    focal, boundary, similarity and smoothness terms
    metrics   DSC / JI / PPV / sensitivity and report tables
    pipeline  two-branch framework, training, inference and checkpoints
    cli       ``lithoseg`` command-line entry point
"""

from .errors import (BundleCorruptError, BundleError, BundleVersionError, ConfigError,
                     DatasetError, LithosegError, MaskValueError, ShapeError)

__version__ = "0.1.0"

__all__ = [
    "BundleCorruptError", "BundleError", "BundleVersionError", "ConfigError", "DatasetError",
    "LithosegError", "MaskValueError", "ShapeError", "__version__",
]
