"""Clip-level augmentation.

One realization of the policy is drawn per clip and applied identically to
all five frames. Spatial transforms also move the mask (nearest neighbour);
photometric transforms never touch it.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass

import cv2
import numpy as np

from .types import ClipSequence

PRESETS = ("none", "all", "rbc_equalize", "rbc_clahe")


@dataclass(frozen=True)
class AugmentationPolicy:
    """Transform probabilities and limits; the defaults enable every transform."""

    hflip_p: float = 0.5
    vflip_p: float = 0.5
    ssr_p: float = 0.5
    ssr_shift: float = 0.0625
    ssr_scale: float = 0.1
    ssr_rotate: float = 45.0
    sharpen_p: float = 0.5
    sharpen_alpha: tuple[float, float] = (0.2, 0.5)
    blur_p: float = 0.5
    blur_kernel: tuple[int, int] = (3, 7)
    rbc_p: float = 0.5
    rbc_limit: float = 0.2
    equalize_p: float = 0.5
    clahe_p: float = 0.5
    clahe_clip: float = 4.0

    def __post_init__(self):
        for f in dataclasses.fields(self):
            if f.name.endswith("_p"):
                p = getattr(self, f.name)
                if not 0.0 <= p <= 1.0:
                    raise ValueError(f"{f.name}={p} is not a probability")

    @classmethod
    def none(cls) -> "AugmentationPolicy":
        return cls(**{f.name: 0.0 for f in dataclasses.fields(cls) if f.name.endswith("_p")})

    @classmethod
    def only(cls, **probs) -> "AugmentationPolicy":
        """Everything disabled except the given ``<name>_p`` probabilities."""
        return dataclasses.replace(cls.none(), **probs)

    @classmethod
    def preset(cls, name: str) -> "AugmentationPolicy":
        if name == "none":
            return cls.none()
        if name == "all":
            return cls()
        if name == "rbc_equalize":
            return cls.only(rbc_p=0.5, equalize_p=0.5)
        if name == "rbc_clahe":
            return cls.only(rbc_p=0.5, clahe_p=0.5)
        raise ValueError(f"unknown augmentation preset {name!r}; choose from {PRESETS}")


def _to_u8(img):
    return np.clip(np.rint(img * 255.0), 0, 255).astype(np.uint8)


def _sharpen(img, alpha, lightness):
    identity = np.zeros((3, 3), np.float32)
    identity[1, 1] = 1.0
    edges = np.full((3, 3), -1.0, np.float32)
    edges[1, 1] = 8.0 + lightness
    kernel = (1 - alpha) * identity + alpha * edges
    return np.clip(cv2.filter2D(img, -1, kernel, borderType=cv2.BORDER_REFLECT_101), 0, 1)


def _equalize(img):
    u8 = _to_u8(img)
    return np.stack([cv2.equalizeHist(u8[..., c]) for c in range(3)], -1).astype(np.float32) / 255


def _clahe(img, clip_limit):
    lab = cv2.cvtColor(_to_u8(img), cv2.COLOR_RGB2LAB)
    lab[..., 0] = cv2.createCLAHE(clipLimit=clip_limit, tileGridSize=(8, 8)).apply(lab[..., 0])
    return cv2.cvtColor(lab, cv2.COLOR_LAB2RGB).astype(np.float32) / 255


def ssr_matrix(size, shift, scale, angle):
    """2x3 affine used by shift-scale-rotate (maps input pixel to output pixel)."""
    h, w = size
    m = cv2.getRotationMatrix2D(((w - 1) / 2, (h - 1) / 2), angle, scale)
    m[0, 2] += shift[0] * w
    m[1, 2] += shift[1] * h
    return m


def augment(clip: ClipSequence, policy: AugmentationPolicy, seed: int) -> ClipSequence:
    rng = np.random.default_rng(seed)
    frames = clip.frames.copy()
    mask = clip.mask.copy()
    h, w = mask.shape

    def hit(p):
        # always consume one draw so realizations do not depend on other probabilities
        return rng.uniform() < p

    do_hflip = hit(policy.hflip_p)
    do_vflip = hit(policy.vflip_p)
    if do_hflip:
        frames, mask = frames[:, :, ::-1], mask[:, ::-1]
    if do_vflip:
        frames, mask = frames[:, ::-1], mask[::-1]
    do_ssr = hit(policy.ssr_p)
    shift = rng.uniform(-policy.ssr_shift, policy.ssr_shift, size=2)
    scale = 1.0 + rng.uniform(-policy.ssr_scale, policy.ssr_scale)
    angle = rng.uniform(-policy.ssr_rotate, policy.ssr_rotate)
    if do_ssr:
        m = ssr_matrix((h, w), shift, scale, angle)
        frames = np.stack([cv2.warpAffine(np.ascontiguousarray(f), m, (w, h), flags=cv2.INTER_LINEAR,
                                          borderMode=cv2.BORDER_REFLECT_101) for f in frames])
        mask = cv2.warpAffine(np.ascontiguousarray(mask), m, (w, h), flags=cv2.INTER_NEAREST,
                              borderMode=cv2.BORDER_REFLECT_101)

    frames = np.ascontiguousarray(frames, dtype=np.float32)
    mask = np.ascontiguousarray(mask)

    do_sharpen = hit(policy.sharpen_p)
    alpha = rng.uniform(*policy.sharpen_alpha)
    lightness = rng.uniform(0.5, 1.0)
    do_blur = hit(policy.blur_p)
    ksize = int(rng.choice(np.arange(policy.blur_kernel[0], policy.blur_kernel[1] + 1, 2)))
    do_rbc = hit(policy.rbc_p)
    brightness, contrast = rng.uniform(-policy.rbc_limit, policy.rbc_limit, size=2)
    do_eq = hit(policy.equalize_p)
    do_clahe = hit(policy.clahe_p)

    out = []
    for f in frames:
        if do_sharpen:
            f = _sharpen(f, alpha, lightness)
        if do_blur:
            f = cv2.GaussianBlur(f, (ksize, ksize), 0)
        if do_rbc:
            f = np.clip(f * (1.0 + contrast) + brightness, 0.0, 1.0)
        if do_eq:
            f = _equalize(f)
        if do_clahe:
            f = _clahe(f, policy.clahe_clip)
        out.append(f)
    spatial = do_hflip or do_vflip or do_ssr
    return clip.replace(frames=np.stack(out).astype(np.float32), mask=mask,
                        motion=None if spatial else clip.motion)
