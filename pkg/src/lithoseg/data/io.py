"""On-disk dataset layout.

::

    <root>/<split>/<clip_id>/frame_1.png ... frame_5.png
    <root>/<split>/<clip_id>/mask.png      # 8-bit single channel, values {0,1,2}
    <root>/manifest.csv                    # written by the generator CLI
"""

from __future__ import annotations

import csv
import logging
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np
from PIL import Image

from ..errors import DatasetError
from .types import NUM_FRAMES, ClipSequence, validate_mask

log = logging.getLogger(__name__)

SPLITS = ("train", "val", "test")
MANIFEST_FIELDS = ("clip_id", "split", "stone_area", "laser_area", "seed")


def frame_name(index: int) -> str:
    return f"frame_{index}.png"


def save_clip(clip: ClipSequence, root, split: str) -> Path:
    """Write one clip into ``root/split/clip_id`` as lossless PNGs."""
    if split not in SPLITS:
        raise ValueError(f"unknown split {split!r}")
    clip_dir = Path(root) / split / clip.clip_id
    clip_dir.mkdir(parents=True, exist_ok=True)
    for k, frame in enumerate(clip.frames, start=1):
        rgb = np.clip(np.rint(frame * 255.0), 0, 255).astype(np.uint8)
        Image.fromarray(rgb).save(clip_dir / frame_name(k))
    Image.fromarray(clip.mask.astype(np.uint8)).save(clip_dir / "mask.png")
    return clip_dir


def load_clip(clip_dir) -> ClipSequence:
    clip_dir = Path(clip_dir)
    clip_id = clip_dir.name
    frames = []
    for k in range(1, NUM_FRAMES + 1):
        path = clip_dir / frame_name(k)
        if not path.is_file():
            raise DatasetError(clip_id, f"missing frame {k} ({path.name})")
        try:
            with Image.open(path) as im:
                frames.append(np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0)
        except OSError as exc:
            raise DatasetError(clip_id, f"cannot decode {path.name}: {exc}") from exc
    mask_path = clip_dir / "mask.png"
    if not mask_path.is_file():
        raise DatasetError(clip_id, "missing mask.png")
    with Image.open(mask_path) as im:
        if im.mode not in ("L", "P"):
            raise DatasetError(clip_id, f"mask must be single-channel, got mode {im.mode}")
        mask = np.asarray(im)
    validate_mask(mask, clip_id)
    shapes = {f.shape[:2] for f in frames}
    if len(shapes) != 1 or mask.shape not in shapes:
        raise DatasetError(clip_id, f"frame/mask sizes disagree: {sorted(shapes)} vs {mask.shape}")
    return ClipSequence(frames=np.stack(frames), mask=mask, clip_id=clip_id)


def load_clip_dataset(root, split: str, workers: int = 1) -> list[ClipSequence]:
    """Load every clip of ``split`` in lexicographic clip-id order."""
    split_dir = Path(root) / split
    if not split_dir.is_dir():
        raise FileNotFoundError(f"no split directory {split_dir}")
    clip_dirs = sorted((p for p in split_dir.iterdir() if p.is_dir()), key=lambda p: p.name)
    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            return list(pool.map(load_clip, clip_dirs))
    return [load_clip(d) for d in clip_dirs]


def write_manifest(rows, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=MANIFEST_FIELDS)
        writer.writeheader()
        for row in rows:
            writer.writerow(row)


def read_manifest(path) -> list[dict]:
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.DictReader(fh))
    for row in rows:
        row["stone_area"] = float(row["stone_area"])
        row["laser_area"] = float(row["laser_area"])
        row["seed"] = int(row["seed"])
    return rows
