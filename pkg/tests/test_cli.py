import csv
import json

import numpy as np
import pytest
import torch
from PIL import Image

from lithoseg.cli import main, split_counts, trend_fraction, window_means
from lithoseg.data import generate_synthetic_clip, save_clip
from lithoseg.losses import LossConfig
from lithoseg.pipeline import (PipelineConfig, infer_frame, new_bundle, save_bundle,
                               train_step)
from lithoseg.segnet import SegNetConfig


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


def last_json(text):
    return json.loads(text.strip().splitlines()[-1])


def read_rows(path):
    with open(path, newline="", encoding="utf-8") as fh:
        return list(csv.DictReader(fh))


@pytest.fixture(scope="module")
def memorized(tmp_path_factory):
    """A bundle whose segmentation net reproduces one clip's mask exactly."""
    torch.manual_seed(0)
    clip = generate_synthetic_clip(0, size=32)
    bundle = new_bundle(PipelineConfig(segnet=SegNetConfig(base_width=8), use_dvfnet=False,
                                       loss=LossConfig(beta=0, zeta=0), lr=3e-3))
    for step in range(1000):
        train_step(bundle, [clip, clip])
        if step % 25 == 24 and np.array_equal(infer_frame(bundle, clip.frames[-1])[0], clip.mask):
            break
    assert np.array_equal(infer_frame(bundle, clip.frames[-1])[0], clip.mask)
    root = tmp_path_factory.mktemp("memo")
    save_bundle(bundle, root / "bundle.pt")
    save_clip(clip, root / "data", "test")
    return root, clip


def test_split_counts():
    assert split_counts(100) == (60, 20, 20)
    assert sum(split_counts(7)) == 7


def test_synth_layout_and_repeatability(capsys, tmp_path):
    for name in ("a", "b"):
        code, out, _ = run(capsys, "synth", "--out", tmp_path / name, "--count", 100,
                           "--preset", "vitro", "--seed", 0, "--size", 32)
        assert code == 0
        assert last_json(out)["splits"] == {"train": 60, "val": 20, "test": 20}
    rows = read_rows(tmp_path / "a" / "manifest.csv")
    assert len(rows) == 100
    assert [sum(r["split"] == s for r in rows) for s in ("train", "val", "test")] == [60, 20, 20]
    assert (tmp_path / "a" / "manifest.csv").read_bytes() == \
        (tmp_path / "b" / "manifest.csv").read_bytes()
    a = sorted(p.relative_to(tmp_path / "a") for p in (tmp_path / "a").rglob("*.png"))
    b = sorted(p.relative_to(tmp_path / "b") for p in (tmp_path / "b").rglob("*.png"))
    assert a == b and all((tmp_path / "a" / p).read_bytes() == (tmp_path / "b" / p).read_bytes()
                          for p in a[:20])


def test_synth_vitro_stone_area(capsys, tmp_path):
    code, _, _ = run(capsys, "synth", "--out", tmp_path, "--count", 100, "--seed", 0,
                     "--size", 128)
    assert code == 0
    areas = [float(r["stone_area"]) for r in read_rows(tmp_path / "manifest.csv")]
    assert abs(np.mean(areas) - 0.357) <= 0.05


def test_synth_unwritable(capsys, tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    code, out, err = run(capsys, "synth", "--out", blocker / "sub", "--count", 1, "--size", 32)
    assert code != 0 and out == ""
    assert len(err.strip().splitlines()) == 1 and "error" in json.loads(err)


def test_output_root_env(capsys, tmp_path, monkeypatch):
    monkeypatch.setenv("LITHOSEG_OUTPUT_ROOT", str(tmp_path))
    code, out, _ = run(capsys, "synth", "--out", "rel", "--count", 2, "--size", 32)
    assert code == 0 and (tmp_path / "rel" / "manifest.csv").exists()


def test_usage_error_is_one_json_line(capsys):
    code, _, err = run(capsys, "synth", "--count", "many")
    assert code == 2
    assert json.loads(err)["error"] == "UsageError"


def test_infer_writes_label_mask(capsys, tmp_path, memorized):
    root, clip = memorized
    image = tmp_path / "frame.png"
    Image.fromarray((clip.frames[-1] * 255).round().astype(np.uint8)).save(image)
    code, out, _ = run(capsys, "infer", "--bundle", root / "bundle.pt", "--image", image,
                       "--out", tmp_path / "mask.png")
    assert code == 0
    mask = np.asarray(Image.open(tmp_path / "mask.png"))
    assert mask.shape == (32, 32) and set(np.unique(mask)) <= {0, 1, 2}
    assert sum(last_json(out)["pixels"].values()) == 32 * 32


def test_infer_rejects_bad_size(capsys, tmp_path, memorized):
    root, _ = memorized
    image = tmp_path / "odd.png"
    Image.fromarray(np.zeros((30, 30, 3), np.uint8)).save(image)
    code, _, err = run(capsys, "infer", "--bundle", root / "bundle.pt", "--image", image,
                       "--out", tmp_path / "m.png")
    assert code == 1 and "error" in json.loads(err)
    assert not (tmp_path / "m.png").exists()


def test_eval_memorized_clip_is_perfect(capsys, tmp_path, memorized):
    root, clip = memorized
    code, out, _ = run(capsys, "eval", "--bundle", root / "bundle.pt", "--data", root / "data",
                       "--split", "test", "--out", tmp_path / "report.csv")
    assert code == 0
    rows = read_rows(tmp_path / "report.csv")
    assert {r["image"] for r in rows} == {clip.clip_id, "__mean__"}
    for r in rows:
        vals = [float(r[k]) for k in ("dsc", "ji", "ppv", "sensitivity") if r[k]]
        assert vals == [1.0] * len(vals)
    for r in rows:
        if r["image"] == "__mean__":
            continue
        assert (float(r["dsc"]), float(r["ji"]), float(r["ppv"]), float(r["sensitivity"])) == \
            (1.0, 1.0, 1.0, 1.0)
    row = last_json(out)
    assert row["mean_dsc_ji"] == 1.0


def test_bench_prints_timing(capsys, memorized):
    root, _ = memorized
    code, out, _ = run(capsys, "bench", "--bundle", root / "bundle.pt", "--n", 3)
    assert code == 0 and "3 images" in out


def test_missing_bundle(capsys, tmp_path):
    code, _, err = run(capsys, "bench", "--bundle", tmp_path / "nope.pt")
    assert code == 1 and json.loads(err)["error"]


# ---------------------------------------------------------------------------
# train


def tiny_dataset(root):
    for i in range(2):
        save_clip(generate_synthetic_clip(i, size=32), root, "train")
    save_clip(generate_synthetic_clip(5, size=32), root, "val")
    return root


SMALL = {"segnet": {"base_width": 8}, "dvfnet": {"widths": [4, 8, 8], "refine_width": 4}}


def test_train_config_wins_over_flags(capsys, tmp_path):
    data = tiny_dataset(tmp_path / "data")
    cfg = tmp_path / "run.json"
    cfg.write_text(json.dumps({**SMALL, "epochs": 1, "dataset_root": str(data),
                               "output_dir": str(tmp_path / "out")}))
    code, out, _ = run(capsys, "train", "--config", cfg, "--epochs", 3, "--seed", 4,
                       "--out", tmp_path / "ignored")
    assert code == 0
    saved = json.loads((tmp_path / "out" / "config.json").read_text())
    assert saved["epochs"] == 1 and saved["seed"] == 4
    assert not (tmp_path / "ignored").exists()
    assert len(read_rows(tmp_path / "out" / "val_metrics.csv")) == 1
    assert (tmp_path / "out" / "bundle.pt").exists()


def test_train_is_reproducible(capsys, tmp_path):
    data = tiny_dataset(tmp_path / "data")
    for name in ("a", "b"):
        cfg = tmp_path / f"{name}.json"
        cfg.write_text(json.dumps({**SMALL, "epochs": 2, "seed": 9}))
        assert run(capsys, "train", "--config", cfg, "--data", data,
                   "--out", tmp_path / name)[0] == 0
    for f in ("losses.csv", "val_metrics.csv"):
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()


def test_train_unknown_config_key(capsys, tmp_path):
    cfg = tmp_path / "run.json"
    cfg.write_text(json.dumps({"epochs": 1, "momentum": 0.9, "dataset_root": str(tmp_path)}))
    code, _, err = run(capsys, "train", "--config", cfg, "--out", tmp_path / "out")
    assert code == 1 and "momentum" in json.loads(err)["message"]
    assert not (tmp_path / "out").exists()


@pytest.mark.parametrize("argv", [["--lr", "-1"], ["--batch-size", "0"], ["--base-width", "3"],
                                  ["--epochs", "0"]])
def test_invalid_flags_fail_before_writing(capsys, tmp_path, argv):
    data = tiny_dataset(tmp_path / "data")
    code, _, err = run(capsys, "train", "--data", data, "--out", tmp_path / "out", *argv)
    assert code == 1 and json.loads(err)["error"]
    assert not (tmp_path / "out").exists()


def test_train_needs_dataset(capsys, tmp_path):
    code, _, err = run(capsys, "train", "--out", tmp_path / "out")
    assert code == 1 and "dataset" in json.loads(err)["message"]


# ---------------------------------------------------------------------------
# plot


def test_window_trend_helpers():
    assert list(window_means([4, 2, 3, 1], 2)) == [3.0, 2.0]
    assert trend_fraction([3, 2, 2, 1]) == pytest.approx(2 / 3)


def write_losses(path, totals):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["step", "focal", "boundary", "similarity", "smoothness", "total"])
        for i, t in enumerate(totals):
            w.writerow([i, t / 2, t / 4, t / 8, 0.0, t])


def summary_row(path, series):
    return next(r for r in read_rows(path) if r["series"] == series)


def test_plot_flags_monotone_losses(capsys, tmp_path):
    steps = np.arange(150)
    write_losses(tmp_path / "losses.csv", 2.0 * np.exp(-steps / 60) + 0.01 * np.sin(steps))
    code, _, _ = run(capsys, "plot", "--metrics-csv", tmp_path / "losses.csv",
                     "--out", tmp_path / "plots")
    assert code == 0
    row = summary_row(tmp_path / "plots" / "summary.csv", "total")
    assert row["windows"] == "15" and row["monotone_decrease"] == "True"
    assert (tmp_path / "plots" / "loss_total.png").stat().st_size > 0


def test_plot_flags_stalled_losses(capsys, tmp_path):
    rng = np.random.default_rng(0)
    write_losses(tmp_path / "losses.csv", 1.0 + 0.1 * rng.standard_normal(150))
    run(capsys, "plot", "--metrics-csv", tmp_path / "losses.csv", "--out", tmp_path / "plots")
    row = summary_row(tmp_path / "plots" / "summary.csv", "total")
    assert row["monotone_decrease"] == "False"


def test_plot_from_training_run(capsys, tmp_path):
    data = tiny_dataset(tmp_path / "data")
    cfg = tmp_path / "run.json"
    cfg.write_text(json.dumps({**SMALL, "epochs": 15, "seed": 0}))
    assert run(capsys, "train", "--config", cfg, "--data", data, "--out", tmp_path / "run")[0] == 0
    losses = read_rows(tmp_path / "run" / "losses.csv")
    total = np.array([float(r["total"]) for r in losses])
    code, _, _ = run(capsys, "plot", "--metrics-csv", tmp_path / "run" / "losses.csv",
                     "--out", tmp_path / "plots")
    assert code == 0
    # one window per epoch; the flag must agree with the run's own window means
    means = [c.mean() for c in np.array_split(total, 15)]
    frac = np.mean(np.diff(means) < 0)
    row = summary_row(tmp_path / "plots" / "summary.csv", "total")
    assert float(row["decreasing_fraction"]) == pytest.approx(frac, abs=1e-6)
    assert row["monotone_decrease"] == str(bool(frac >= 0.9))
    code, _, _ = run(capsys, "plot", "--metrics-csv", tmp_path / "run" / "val_metrics.csv",
                     "--out", tmp_path / "val")
    assert code == 0 and (tmp_path / "val" / "summary.csv").exists()


def test_plot_area_boxplot(capsys, tmp_path):
    run(capsys, "synth", "--out", tmp_path / "d", "--count", 5, "--size", 32)
    code, out, _ = run(capsys, "plot", "--metrics-csv", tmp_path / "d" / "manifest.csv",
                       "--out", tmp_path / "p")
    assert code == 0 and any(p.endswith(".png") for p in last_json(out)["plots"])


def test_plot_comparison_table(capsys, tmp_path):
    code, _, _ = run(capsys, "plot", "--metrics-csv",
                     "tests/fixtures/reference_hybresunet_vitro.csv", "--out", tmp_path / "t")
    assert code == 0 and list((tmp_path / "t").glob("*.png"))


def test_plot_bad_windows(capsys, tmp_path):
    write_losses(tmp_path / "l.csv", [1.0, 0.5])
    code, _, err = run(capsys, "plot", "--metrics-csv", tmp_path / "l.csv", "--out",
                       tmp_path / "p", "--windows", 1)
    assert code == 1 and json.loads(err)["error"] == "ConfigError"
    assert not (tmp_path / "p").exists()
