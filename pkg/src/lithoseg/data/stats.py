"""Per-class relative-area statistics of a dataset."""

from __future__ import annotations

import numpy as np

from .types import CLASS_NAMES, ClipSequence


def relative_areas(mask: np.ndarray) -> dict[str, float]:
    """Fraction of all pixels carrying each label."""
    counts = np.bincount(mask.ravel(), minlength=len(CLASS_NAMES))
    return {name: counts[i] / mask.size for i, name in enumerate(CLASS_NAMES)}


def split_stats(dataset: list[ClipSequence]) -> dict[str, tuple[float, float]]:
    """Mean and population standard deviation of each class's relative area."""
    if not dataset:
        raise ValueError("split_stats needs at least one clip")
    areas = np.array([[relative_areas(c.mask)[n] for n in CLASS_NAMES] for c in dataset])
    return {n: (float(areas[:, i].mean()), float(areas[:, i].std(ddof=0)))
            for i, n in enumerate(CLASS_NAMES)}
