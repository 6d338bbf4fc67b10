import csv
from pathlib import Path

import numpy as np
import pytest
import torch
import torch.nn as nn
from hypothesis import given, settings
from hypothesis import strategies as st

from lithoseg.data import ClipSequence
from lithoseg.errors import ShapeError
from lithoseg.metrics import (TABLE_COLUMNS, ConfusionCounts, MetricsReport, argmax_labels,
                              confusion, evaluate, mean_dsc_ji, report_from_masks, scores,
                              write_table)
from oracles import confusion_oracle

FIXTURES = Path(__file__).parent / "fixtures"
PALETTE = torch.tensor([[0.1, 0.1, 0.1], [0.9, 0.5, 0.1], [0.2, 0.9, 0.9]])


class PaletteNet(nn.Module):
    """Decodes labels from frames painted with PALETTE: a net whose output is the gt."""

    def __init__(self):
        super().__init__()
        self.scale = nn.Parameter(torch.tensor(50.0))

    def forward(self, x):
        d = ((x.unsqueeze(1) - PALETTE.view(1, 3, 3, 1, 1)) ** 2).sum(2)
        return torch.softmax(-self.scale * d, dim=1)


def painted_clip(mask, clip_id):
    frame = PALETTE.numpy()[mask]
    return ClipSequence(frames=np.repeat(frame[None], 5, 0), mask=mask, clip_id=clip_id)


def test_confusion_identical():
    gt = np.zeros((6, 6), np.uint8)
    gt[1:3, 1:4] = 1
    assert confusion(gt, gt, 1) == ConfusionCounts(6, 0, 0, 30)


def test_confusion_all_background():
    gt = np.zeros((6, 6), np.uint8)
    gt[0, :5] = 2
    c = confusion(np.zeros_like(gt), gt, 2)
    assert (c.tp, c.fn) == (0, 5)


def test_confusion_size_mismatch():
    with pytest.raises(ShapeError):
        confusion(np.zeros((4, 4)), np.zeros((4, 5)), 1)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 10 ** 6))
def test_confusion_matches_loop(seed):
    rng = np.random.default_rng(seed)
    pred, gt = rng.integers(0, 3, (2, 8, 8))
    for c in range(3):
        counts = confusion(pred, gt, c)
        assert tuple(counts) == confusion_oracle(pred, gt, c)
        assert counts.total == 64


def test_scores_examples():
    assert scores(ConfusionCounts(10, 0, 0, 5)) == (1.0, 1.0, 1.0, 1.0)
    dsc, ji, ppv, sens = scores(ConfusionCounts(1, 1, 1, 0))
    assert dsc == 0.5 and ji == pytest.approx(1 / 3) and ppv == 0.5 and sens == 0.5
    assert scores(ConfusionCounts(0, 0, 0, 9)) == (1.0, 1.0, 1.0, 1.0)


@settings(max_examples=200, deadline=None)
@given(st.integers(1, 10 ** 6), st.integers(0, 10 ** 6), st.integers(0, 10 ** 6))
def test_score_identities(tp, fp, fn):
    dsc, ji, ppv, sens = scores(ConfusionCounts(tp, fp, fn, 0))
    assert abs(dsc - 2 * ji / (1 + ji)) <= 1e-12
    assert abs(dsc - 2 * ppv * sens / (ppv + sens)) <= 1e-12
    assert all(0 <= v <= 1 for v in (dsc, ji, ppv, sens))


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 10 ** 6))
def test_dsc_symmetric(seed):
    rng = np.random.default_rng(seed)
    a, b = rng.integers(0, 3, (2, 10, 10))
    for c in (1, 2):
        assert scores(confusion(a, b, c))[0] == scores(confusion(b, a, c))[0]


def test_class_means_are_image_means():
    report = MetricsReport(per_image=[
        ("a", "stone", 0.8, 0.7, 0.8, 0.8), ("a", "laser", 1.0, 1.0, 1.0, 1.0),
        ("b", "stone", 0.9, 0.8, 0.9, 0.9), ("b", "laser", 0.5, 0.4, 0.5, 0.5),
    ])
    m = report.class_means()
    assert m["stone"]["dsc"] == pytest.approx(0.85)
    assert m["laser"]["ji"] == pytest.approx(0.7)
    assert report.mean_dsc_ji() == pytest.approx((0.85 + 0.75 + 0.75 + 0.7) / 4)


def test_reference_fixture_mean_convention():
    with open(FIXTURES / "reference_hybresunet_vitro.csv", newline="") as fh:
        row = next(csv.DictReader(fh))
    assert tuple(row) == TABLE_COLUMNS
    means = {"stone": {"dsc": float(row["dsc_stone"]), "ji": float(row["ji_stone"])},
             "laser": {"dsc": float(row["dsc_laser"]), "ji": float(row["ji_laser"])}}
    assert abs(mean_dsc_ji(means) - float(row["mean_dsc_ji"])) <= 1e-4


def test_report_table_row_layout(tmp_path):
    rng = np.random.default_rng(0)
    pairs = [(f"img{i}", *rng.integers(0, 3, (2, 16, 16))) for i in range(3)]
    report = report_from_masks(pairs)
    row = report.table_row("X")
    assert tuple(row) == TABLE_COLUMNS
    write_table([row], tmp_path / "t.csv")
    with open(tmp_path / "t.csv", newline="") as fh:
        assert next(csv.reader(fh)) == list(TABLE_COLUMNS)


def test_report_csv_columns(tmp_path):
    pairs = [("x", np.zeros((4, 4), np.uint8), np.zeros((4, 4), np.uint8))]
    path = tmp_path / "r.csv"
    report_from_masks(pairs).write_csv(path)
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["image", "class", "dsc", "ji", "ppv", "sensitivity"]
    assert rows[1][:2] == ["x", "stone"] and float(rows[1][2]) == 1.0


def test_exclude_empty_flag():
    pairs = [("x", np.zeros((4, 4), np.uint8), np.zeros((4, 4), np.uint8))]
    report = report_from_masks(pairs, exclude_empty=True)
    assert all(np.isnan(r[2]) for r in report.per_image)


def test_evaluate_perfect_net():
    rng = np.random.default_rng(1)
    clips = []
    for i in range(5):
        mask = np.zeros((32, 32), np.uint8)
        y, x = rng.integers(4, 20, 2)
        mask[y:y + 8, x:x + 8] = 1
        mask[rng.integers(0, 32), :] = 2
        clips.append(painted_clip(mask, f"c{i}"))
    report = evaluate(PaletteNet(), clips, batch_size=2)
    assert len(report.per_image) == 10
    for row in report.per_image:
        assert row[2:] == (1.0, 1.0, 1.0, 1.0)


def test_evaluate_empty_dataset():
    with pytest.raises(ValueError):
        evaluate(PaletteNet(), [])


def test_argmax_tie_lowest_index():
    probs = torch.tensor([1 / 3, 1 / 3, 1 / 3]).view(1, 3, 1, 1)
    assert argmax_labels(probs).item() == 0
    probs = torch.tensor([0.2, 0.4, 0.4]).view(1, 3, 1, 1)
    assert argmax_labels(probs).item() == 1
    assert argmax_labels(probs.numpy()).item() == 1
