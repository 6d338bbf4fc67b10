from .augment import AugmentationPolicy, augment
from .io import SPLITS, load_clip, load_clip_dataset, read_manifest, save_clip, write_manifest
from .stats import relative_areas, split_stats
from .synth import SceneParams, generate_synthetic_clip, true_displacement
from .types import (BACKGROUND, CLASS_NAMES, LASER, NUM_CLASSES, NUM_FRAMES, STONE, ClipSequence,
                    to_grayscale, validate_mask)

__all__ = [
    "AugmentationPolicy", "augment", "SPLITS", "load_clip", "load_clip_dataset", "read_manifest",
    "save_clip", "write_manifest", "relative_areas", "split_stats", "SceneParams",
    "generate_synthetic_clip", "true_displacement", "BACKGROUND", "CLASS_NAMES", "LASER",
    "NUM_CLASSES", "NUM_FRAMES", "STONE", "ClipSequence", "to_grayscale", "validate_mask",
]
