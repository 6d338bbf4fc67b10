"""Core data containers: clips, masks and grayscale conversion."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from ..errors import ShapeError

NUM_FRAMES = 5
NUM_CLASSES = 3
CLASS_NAMES = ("background", "stone", "laser")
BACKGROUND, STONE, LASER = 0, 1, 2

# ITU-R BT.601 luma
LUMA_WEIGHTS = (0.299, 0.587, 0.114)


@dataclass
class ClipSequence:
    """Five temporally ordered RGB frames with the label mask of the last frame.

    ``frames`` has shape ``(5, H, W, 3)`` with float values in [0, 1]. ``mask``
    has shape ``(H, W)`` and labels frame 5. ``motion`` is only populated by the
    synthetic generator: ``(5, 2, H, W)`` displacements (dx, dy) that map a
    pixel of frame 5 to the scene point rendered at that pixel in frame k.
    """

    frames: np.ndarray
    mask: np.ndarray
    clip_id: str = ""
    motion: Optional[np.ndarray] = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        frames = np.asarray(self.frames)
        mask = np.asarray(self.mask)
        if frames.ndim != 4 or frames.shape[0] != NUM_FRAMES or frames.shape[-1] != 3:
            raise ShapeError(f"frames must be (5, H, W, 3), got {frames.shape}")
        if mask.shape != frames.shape[1:3]:
            raise ShapeError(f"mask shape {mask.shape} does not match frames {frames.shape[1:3]}")
        validate_mask(mask, self.clip_id)
        self.frames = frames.astype(np.float32, copy=False)
        self.mask = mask.astype(np.uint8, copy=False)

    @property
    def size(self) -> tuple[int, int]:
        return self.mask.shape

    def replace(self, **changes) -> "ClipSequence":
        kwargs = dict(frames=self.frames, mask=self.mask, clip_id=self.clip_id, motion=self.motion)
        kwargs.update(changes)
        return ClipSequence(**kwargs)


def validate_mask(mask: np.ndarray, clip_id: str = "") -> None:
    from ..errors import MaskValueError

    bad = np.setdiff1d(np.unique(mask), np.arange(NUM_CLASSES))
    if bad.size:
        raise MaskValueError(clip_id, f"mask contains labels {bad.tolist()} outside {{0,1,2}}")


def to_grayscale(image):
    """Luma of an RGB image.

    Accepts a numpy array with channels last ``(..., 3)`` or a torch tensor with
    channels at dim -3 ``(..., 3, H, W)``. Returns values in [0, 1].
    """
    try:
        import torch
    except ImportError:  # pragma: no cover
        torch = None

    if torch is not None and isinstance(image, torch.Tensor):
        if image.ndim < 3 or image.shape[-3] != 3:
            raise ShapeError(f"expected 3 channels at dim -3, got shape {tuple(image.shape)}")
        w = torch.tensor(LUMA_WEIGHTS, dtype=image.dtype, device=image.device).view(3, 1, 1)
        return (image * w).sum(dim=-3, keepdim=True)

    image = np.asarray(image)
    if image.ndim < 2 or image.shape[-1] != 3:
        raise ShapeError(f"expected 3 channels in the last axis, got shape {image.shape}")
    return image @ np.asarray(LUMA_WEIGHTS, dtype=image.dtype if image.dtype.kind == "f" else np.float64)
