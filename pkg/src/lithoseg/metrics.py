"""Segmentation metrics (DSC, JI, PPV, sensitivity) and report tables."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from .data.types import CLASS_NAMES, LASER, STONE
from .errors import ShapeError

METRIC_NAMES = ("dsc", "ji", "ppv", "sensitivity")
REPORT_CLASSES = (STONE, LASER)


class ConfusionCounts(NamedTuple):
    tp: int
    fp: int
    fn: int
    tn: int

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.fn + self.tn


def confusion(pred: np.ndarray, gt: np.ndarray, class_id: int) -> ConfusionCounts:
    """One-vs-rest pixel counts for ``class_id``."""
    pred, gt = np.asarray(pred), np.asarray(gt)
    if pred.shape != gt.shape:
        raise ShapeError(f"prediction {pred.shape} and ground truth {gt.shape} differ")
    p = pred == class_id
    g = gt == class_id
    tp = int(np.count_nonzero(p & g))
    fp = int(np.count_nonzero(p & ~g))
    fn = int(np.count_nonzero(~p & g))
    return ConfusionCounts(tp, fp, fn, p.size - tp - fp - fn)


def scores(counts: ConfusionCounts, empty_score: float = 1.0) -> tuple[float, float, float, float]:
    """(dsc, ji, ppv, sensitivity). A class absent from both masks scores ``empty_score``."""
    tp, fp, fn = counts.tp, counts.fp, counts.fn
    if tp + fp + fn == 0:
        return (empty_score,) * 4
    dsc = 2 * tp / (2 * tp + fp + fn)
    ji = tp / (tp + fp + fn)
    ppv = tp / (tp + fp) if tp + fp else 0.0
    sens = tp / (tp + fn) if tp + fn else 0.0
    return dsc, ji, ppv, sens


@dataclass
class MetricsReport:
    """Per-image scores for the stone and laser classes plus aggregates.

    ``per_image`` rows are ``(image_id, class_name, dsc, ji, ppv, sensitivity)``;
    scores of images skipped under ``exclude_empty`` are NaN.
    """

    per_image: list = field(default_factory=list)

    def class_means(self) -> dict[str, dict[str, float]]:
        out = {}
        for c in REPORT_CLASSES:
            name = CLASS_NAMES[c]
            rows = np.array([r[2:] for r in self.per_image if r[1] == name], dtype=np.float64)
            out[name] = {m: float(np.nanmean(rows[:, i])) if rows.size else float("nan")
                         for i, m in enumerate(METRIC_NAMES)}
        return out

    def mean_dsc_ji(self) -> float:
        """Mean of stone DSC, laser DSC, stone JI and laser JI class means."""
        return mean_dsc_ji(self.class_means())

    def mean_dsc(self) -> float:
        m = self.class_means()
        return (m["stone"]["dsc"] + m["laser"]["dsc"]) / 2

    def table_row(self, name: str) -> dict:
        """Row laid out like the method comparison tables."""
        m = self.class_means()
        return {
            "method": name,
            "dsc_stone": m["stone"]["dsc"], "dsc_laser": m["laser"]["dsc"],
            "ji_stone": m["stone"]["ji"], "ji_laser": m["laser"]["ji"],
            "mean_dsc_ji": self.mean_dsc_ji(),
            "ppv_stone": m["stone"]["ppv"], "ppv_laser": m["laser"]["ppv"],
            "sensitivity_stone": m["stone"]["sensitivity"],
            "sensitivity_laser": m["laser"]["sensitivity"],
        }

    def write_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(("image", "class") + METRIC_NAMES)
            for row in self.per_image:
                writer.writerow([row[0], row[1]] + [f"{v:.6f}" for v in row[2:]])
            for name, vals in self.class_means().items():
                writer.writerow(["__mean__", name] + [f"{vals[m]:.6f}" for m in METRIC_NAMES])
            writer.writerow(["__mean__", "dsc_ji", f"{self.mean_dsc_ji():.6f}", "", "", ""])


TABLE_COLUMNS = ("method", "dsc_stone", "dsc_laser", "ji_stone", "ji_laser", "mean_dsc_ji",
                 "ppv_stone", "ppv_laser", "sensitivity_stone", "sensitivity_laser")


def mean_dsc_ji(class_means: dict) -> float:
    return (class_means["stone"]["dsc"] + class_means["laser"]["dsc"]
            + class_means["stone"]["ji"] + class_means["laser"]["ji"]) / 4


def report_from_masks(pairs, exclude_empty: bool = False) -> MetricsReport:
    """Build a report from ``(image_id, pred_mask, gt_mask)`` triples."""
    report = MetricsReport()
    for image_id, pred, gt in pairs:
        for c in REPORT_CLASSES:
            counts = confusion(pred, gt, c)
            vals = scores(counts, empty_score=float("nan") if exclude_empty else 1.0)
            report.per_image.append((image_id, CLASS_NAMES[c]) + tuple(vals))
    return report


def evaluate(net, dataset, batch_size: int = 4, exclude_empty: bool = False) -> MetricsReport:
    """Frame-wise inference on frame 5 of each clip, scored against its mask."""
    import torch

    if not dataset:
        raise ValueError("cannot evaluate an empty dataset")
    was_training = net.training
    net.eval()
    pairs = []
    try:
        with torch.no_grad():
            for start in range(0, len(dataset), batch_size):
                chunk = dataset[start:start + batch_size]
                x = torch.from_numpy(np.stack([c.frames[-1] for c in chunk])).permute(0, 3, 1, 2)
                x = x.to(next(net.parameters()).dtype)
                pred = argmax_labels(net(x)).numpy()
                pairs.extend((c.clip_id, p, c.mask) for c, p in zip(chunk, pred))
    finally:
        net.train(was_training)
    return report_from_masks(pairs, exclude_empty)


def argmax_labels(probs):
    """Class index per pixel; ties resolve to the lowest index."""
    # torch/numpy argmax both return the first maximal index
    return probs.argmax(dim=1) if hasattr(probs, "dim") else np.argmax(probs, axis=1)


def write_table(rows, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=TABLE_COLUMNS)
        writer.writeheader()
        for row in rows:
            writer.writerow({k: (f"{v:.4f}" if isinstance(v, float) else v) for k, v in row.items()})
