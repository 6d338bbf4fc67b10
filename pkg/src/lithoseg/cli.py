"""Command-line entry point: ``lithoseg <command> [options]``.

Commands
    synth   write a synthetic dataset (60/20/20 split) and its manifest
    train   train the framework from a JSON run config and/or flags
    eval    score a bundle on one split, per-image CSV plus summary
    infer   segment one RGB image and write the label mask
    bench   time inference on ``--n`` frames
    plot    plots and a summary CSV from a metrics/loss CSV or a manifest

Run config precedence: values in ``--config`` override command-line flags,
which override built-in defaults. Relative output paths are resolved
against ``$LITHOSEG_OUTPUT_ROOT`` when that variable is set.

Failures print a single JSON line ``{"error": <type>, "message": <text>}``
on stderr and exit with a nonzero status (2 for usage errors, 1 otherwise).
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from pathlib import Path
from typing import TYPE_CHECKING

import numpy as np

from .errors import ConfigError, LithosegError, ShapeError

if TYPE_CHECKING:
    from .pipeline import PipelineConfig

OUTPUT_ROOT_ENV = "LITHOSEG_OUTPUT_ROOT"
SPLIT_FRACTIONS = (0.6, 0.2, 0.2)
TREND_THRESHOLD = 0.9

# keys accepted in a run config besides the PipelineConfig fields
RUN_KEYS = {
    "dataset_root": "directory holding train/ and val/ splits (required)",
    "output_dir": "where bundle.pt, losses.csv, val_metrics.csv and config.json go (default: run)",
}

log = logging.getLogger("lithoseg")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def output_path(path) -> Path:
    path = Path(path)
    root = os.environ.get(OUTPUT_ROOT_ENV)
    if root and not path.is_absolute():
        return Path(root) / path
    return path


def _ensure_writable_dir(path: Path) -> Path:
    try:
        path.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create output directory {path}: {exc.strerror or exc}") from exc
    if not os.access(path, os.W_OK):
        raise PermissionError(f"output directory {path} is not writable")
    return path


# ---------------------------------------------------------------------------
# synth


def split_counts(count: int) -> tuple[int, int, int]:
    n_train = int(round(count * SPLIT_FRACTIONS[0]))
    n_val = int(round(count * SPLIT_FRACTIONS[1]))
    return n_train, n_val, count - n_train - n_val


def cmd_synth(args) -> int:
    from .data import SceneParams, generate_synthetic_clip, relative_areas, save_clip, write_manifest

    if args.count < 1:
        raise ConfigError("--count must be >= 1")
    if args.size % 16:
        raise ConfigError("--size must be a multiple of 16")
    params = SceneParams.preset(args.preset)
    out = _ensure_writable_dir(output_path(args.out))
    seeds = np.random.SeedSequence(args.seed).generate_state(args.count)
    n_train, n_val, _ = split_counts(args.count)
    rows = []
    for i, seed in enumerate(seeds):
        split = "train" if i < n_train else "val" if i < n_train + n_val else "test"
        clip = generate_synthetic_clip(int(seed), params, size=args.size, clip_id=f"clip_{i:04d}")
        save_clip(clip, out, split)
        areas = relative_areas(clip.mask)
        rows.append({"clip_id": clip.clip_id, "split": split, "stone_area": f"{areas['stone']:.6f}",
                     "laser_area": f"{areas['laser']:.6f}", "seed": int(seed)})
    write_manifest(rows, out / "manifest.csv")
    print(json.dumps({"out": str(out), "clips": len(rows),
                      "splits": dict(zip(("train", "val", "test"), split_counts(args.count)))}))
    return 0


# ---------------------------------------------------------------------------
# train


def build_run_config(args) -> tuple[dict, PipelineConfig]:
    """Merge defaults, flags and the config file (file wins) into a run spec."""
    from .pipeline import PipelineConfig

    base = PipelineConfig.desk_scale() if args.desk_scale else PipelineConfig()
    data = base.to_dict()
    run = {"dataset_root": None, "output_dir": "run"}

    flags = {"epochs": args.epochs, "seed": args.seed, "wiring": args.wiring,
             "augmentation": args.augmentation, "batch_size": args.batch_size, "lr": args.lr}
    data.update({k: v for k, v in flags.items() if v is not None})
    seg_flags = {"variant": args.variant, "base_width": args.base_width,
                 "use_attention": args.attention, "use_aspp": args.aspp}
    data["segnet"].update({k: v for k, v in seg_flags.items() if v is not None})
    if args.data is not None:
        run["dataset_root"] = args.data
    if args.out is not None:
        run["output_dir"] = args.out

    if args.config is not None:
        try:
            text = Path(args.config).read_text(encoding="utf-8")
        except OSError as exc:
            raise OSError(f"cannot read config {args.config}: {exc.strerror or exc}") from exc
        try:
            doc = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config {args.config} is not valid JSON: {exc}") from exc
        if not isinstance(doc, dict):
            raise ConfigError("config file must hold a JSON object")
        for key in RUN_KEYS:
            if key in doc:
                run[key] = doc.pop(key)
        for key, value in doc.items():
            if key in ("segnet", "dvfnet", "loss") and isinstance(value, dict) \
                    and isinstance(data.get(key), dict):
                data[key].update(value)
            else:
                data[key] = value
    config = PipelineConfig.from_dict(data)
    if not run["dataset_root"]:
        raise ConfigError("a dataset root is required (--data or dataset_root in the config)")
    return run, config


def cmd_train(args) -> int:
    from .pipeline import save_bundle, train

    run, config = build_run_config(args)
    root = Path(run["dataset_root"])
    if not (root / "train").is_dir() or not (root / "val").is_dir():
        raise FileNotFoundError(f"dataset root {root} needs train/ and val/ directories")
    out = _ensure_writable_dir(output_path(run["output_dir"]))

    def progress(row):
        print(json.dumps({k: (round(v, 6) if isinstance(v, float) else v) for k, v in row.items()}),
              flush=True)

    bundle = train(config, dataset_root=root, out_dir=out, progress=progress)
    save_bundle(bundle, out / "bundle.pt")
    (out / "config.json").write_text(json.dumps({**config.to_dict(), "dataset_root": str(root),
                                                 "output_dir": str(out)}, indent=2) + "\n",
                                     encoding="utf-8")
    print(json.dumps({"bundle": str(out / "bundle.pt"), "best_epoch": bundle.best_epoch}))
    return 0


# ---------------------------------------------------------------------------
# eval / infer / bench


def cmd_eval(args) -> int:
    from .data import load_clip_dataset
    from .metrics import evaluate
    from .pipeline import load_bundle

    bundle = load_bundle(args.bundle)
    dataset = load_clip_dataset(args.data, args.split)
    if not dataset:
        raise FileNotFoundError(f"no clips under {Path(args.data) / args.split}")
    report = evaluate(bundle.inference_net, dataset, exclude_empty=args.exclude_empty)
    if args.out is not None:
        path = output_path(args.out)
        _ensure_writable_dir(path.parent)
        report.write_csv(path)
    row = report.table_row(bundle.inference_net.config.name)
    print(json.dumps({k: (round(v, 6) if isinstance(v, float) else v) for k, v in row.items()}))
    return 0


def read_rgb(path) -> np.ndarray:
    from PIL import Image

    try:
        with Image.open(path) as im:
            return np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0
    except FileNotFoundError:
        raise
    except OSError as exc:
        raise OSError(f"cannot decode image {path}: {exc}") from exc


def cmd_infer(args) -> int:
    from PIL import Image

    from .pipeline import infer_frame, load_bundle

    bundle = load_bundle(args.bundle)
    frame = read_rgb(args.image)
    if frame.shape[0] % 16 or frame.shape[1] % 16:
        raise ShapeError(f"image size {frame.shape[:2]} is not divisible by 16")
    out = output_path(args.out)
    _ensure_writable_dir(out.parent)
    mask, _ = infer_frame(bundle, frame)
    Image.fromarray(mask).save(out)
    counts = np.bincount(mask.ravel(), minlength=3)
    print(json.dumps({"out": str(out), "pixels": {"background": int(counts[0]),
                                                  "stone": int(counts[1]),
                                                  "laser": int(counts[2])}}))
    return 0


def cmd_bench(args) -> int:
    from .pipeline import benchmark_inference, format_timing, load_bundle

    if args.n < 1:
        raise ConfigError("--n must be >= 1")
    bundle = load_bundle(args.bundle)
    frame = read_rgb(args.image) if args.image else None
    result = benchmark_inference(bundle, n=args.n, frame=frame)
    print(format_timing(result))
    return 0


# ---------------------------------------------------------------------------
# plot


def read_table(path) -> tuple[list[str], list[dict]]:
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        rows = list(reader)
        return list(reader.fieldnames or []), rows


def window_means(values, windows: int) -> np.ndarray:
    values = np.asarray(values, dtype=np.float64)
    windows = max(1, min(windows, len(values)))
    return np.array([chunk.mean() for chunk in np.array_split(values, windows)])


def trend_fraction(series) -> float:
    """Share of consecutive pairs in which the series strictly decreases."""
    series = np.asarray(series, dtype=np.float64)
    if len(series) < 2:
        return float("nan")
    return float(np.mean(np.diff(series) < 0))


def _series_summary(name, values, windows):
    values = np.asarray(values, dtype=np.float64)
    means = window_means(values, windows)
    frac = trend_fraction(means)
    return {"series": name, "n": len(values), "first": values[0], "last": values[-1],
            "min": values.min(), "max": values.max(), "windows": len(means),
            "decreasing_fraction": frac, "monotone_decrease": bool(frac >= TREND_THRESHOLD)}


def _write_summary(path, rows):
    cols = ["series", "n", "first", "last", "min", "max", "windows", "decreasing_fraction",
            "monotone_decrease"]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=cols)
        writer.writeheader()
        for r in rows:
            writer.writerow({k: (f"{v:.6f}" if isinstance(v, float) else v) for k, v in r.items()})


def _plot_curves(plt, x, series: dict, xlabel, path, title):
    fig, ax = plt.subplots(figsize=(6, 4))
    for name, ys in series.items():
        ax.plot(x, ys, label=name)
    ax.set_xlabel(xlabel)
    ax.set_title(title)
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)


def cmd_plot(args) -> int:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    from .metrics import TABLE_COLUMNS

    if args.windows < 2:
        raise ConfigError("--windows must be >= 2")
    fields, rows = read_table(args.metrics_csv)
    if not rows:
        raise ValueError(f"{args.metrics_csv} has no data rows")
    out = _ensure_writable_dir(output_path(args.out))
    summary, written = [], []

    def col(name):
        return [float(r[name]) for r in rows]

    if "step" in fields and "total" in fields:
        names = [c for c in ("focal", "boundary", "similarity", "smoothness", "total") if c in fields]
        steps = col("step")
        for name in names:
            summary.append(_series_summary(name, col(name), args.windows))
            _plot_curves(plt, steps, {name: col(name)}, "step", out / f"loss_{name}.png", name)
            written.append(f"loss_{name}.png")
    elif "epoch" in fields and "mean" in fields:
        names = [c for c in fields if c != "epoch"]
        epochs = col("epoch")
        for name in names:
            # validation scores should rise; report the decrease share of the negated curve
            s = _series_summary(name, [-v for v in col(name)], args.windows)
            s.update(first=-s["first"], last=-s["last"], min=-s["max"], max=-s["min"])
            s["monotone_decrease"] = False
            summary.append(s)
        _plot_curves(plt, epochs, {n: col(n) for n in names}, "epoch", out / "val_metrics.png",
                     "validation")
        written.append("val_metrics.png")
    elif "method" in fields and set(TABLE_COLUMNS[1:5]) <= set(fields):
        metrics = [c for c in TABLE_COLUMNS[1:] if c in fields]
        fig, ax = plt.subplots(figsize=(max(6, len(metrics)), 4))
        width = 0.8 / len(rows)
        x = np.arange(len(metrics))
        for i, r in enumerate(rows):
            ax.bar(x + i * width, [float(r[m]) for m in metrics], width, label=r["method"])
            summary.append({"series": r["method"], "n": len(metrics),
                            "first": float(r[metrics[0]]), "last": float(r[metrics[-1]]),
                            "min": min(float(r[m]) for m in metrics),
                            "max": max(float(r[m]) for m in metrics), "windows": "",
                            "decreasing_fraction": "", "monotone_decrease": ""})
        ax.set_xticks(x + 0.4 - width / 2, metrics, rotation=30, ha="right")
        ax.legend()
        fig.tight_layout()
        fig.savefig(out / "comparison.png", dpi=100)
        plt.close(fig)
        written.append("comparison.png")
    elif {"split", "stone_area", "laser_area"} <= set(fields):
        fig, axes = plt.subplots(1, 2, figsize=(8, 4))
        splits = [s for s in ("train", "val", "test") if any(r["split"] == s for r in rows)]
        for ax, name in zip(axes, ("stone_area", "laser_area")):
            data = [[float(r[name]) for r in rows if r["split"] == s] for s in splits]
            ax.boxplot(data)
            ax.set_xticks(range(1, len(splits) + 1), splits)
            ax.set_title(name.replace("_", " "))
            for s, vals in zip(splits, data):
                v = np.asarray(vals)
                summary.append({"series": f"{name}:{s}", "n": len(v), "first": v[0],
                                "last": v[-1], "min": v.min(), "max": v.max(), "windows": "",
                                "decreasing_fraction": "", "monotone_decrease": ""})
        fig.tight_layout()
        fig.savefig(out / "area_boxplots.png", dpi=100)
        plt.close(fig)
        written.append("area_boxplots.png")
    else:
        raise ValueError(f"unrecognized CSV columns in {args.metrics_csv}: {fields}")

    _write_summary(out / "summary.csv", summary)
    print(json.dumps({"out": str(out), "plots": written, "summary": "summary.csv"}))
    return 0


# ---------------------------------------------------------------------------
# entry point


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="lithoseg", description="Stone and laser segmentation toolkit.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("synth", help="generate a synthetic dataset")
    s.add_argument("--out", required=True)
    s.add_argument("--count", type=int, default=100)
    s.add_argument("--preset", choices=("vitro", "vivo"), default="vitro")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--size", type=int, default=256, help="frame side in pixels")
    s.set_defaults(func=cmd_synth)

    t = sub.add_parser("train", help="train a bundle")
    t.add_argument("--config", help="JSON run config; its values override flags")
    t.add_argument("--data", help="dataset root")
    t.add_argument("--out", help="output directory")
    t.add_argument("--desk-scale", action="store_true",
                   help="start from the reduced setting (base width 32, 15 epochs)")
    t.add_argument("--epochs", type=int)
    t.add_argument("--seed", type=int)
    t.add_argument("--wiring", choices=("dvf_input", "warped_input"))
    t.add_argument("--augmentation", choices=("none", "all", "rbc_equalize", "rbc_clahe"))
    t.add_argument("--batch-size", type=int)
    t.add_argument("--lr", type=float)
    t.add_argument("--variant", choices=("unet", "hybresunet", "deepresunet", "r2unet"))
    t.add_argument("--base-width", type=int)
    t.add_argument("--attention", action=argparse.BooleanOptionalAction, default=None)
    t.add_argument("--aspp", action=argparse.BooleanOptionalAction, default=None)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="score a bundle on a dataset split")
    e.add_argument("--bundle", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--split", choices=("train", "val", "test"), default="test")
    e.add_argument("--out", help="per-image report CSV")
    e.add_argument("--exclude-empty", action="store_true",
                   help="skip classes absent from both masks instead of scoring them 1")
    e.set_defaults(func=cmd_eval)

    i = sub.add_parser("infer", help="segment one image")
    i.add_argument("--bundle", required=True)
    i.add_argument("--image", required=True)
    i.add_argument("--out", required=True, help="mask PNG with values 0, 1, 2")
    i.set_defaults(func=cmd_infer)

    b = sub.add_parser("bench", help="time inference")
    b.add_argument("--bundle", required=True)
    b.add_argument("--n", type=int, default=10)
    b.add_argument("--image", help="frame to time on (default: random 256x256)")
    b.set_defaults(func=cmd_bench)

    g = sub.add_parser("plot", help="plots and summary from a CSV")
    g.add_argument("--metrics-csv", required=True,
                   help="losses.csv, val_metrics.csv, a comparison table or a manifest")
    g.add_argument("--out", required=True)
    g.add_argument("--windows", type=int, default=15,
                   help="number of windows for the loss trend check")
    g.set_defaults(func=cmd_plot)
    return p


def _fail(kind: str, message: str, code: int) -> int:
    print(json.dumps({"error": kind, "message": " ".join(str(message).split())}), file=sys.stderr)
    return code


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        return _fail("UsageError", exc, 2)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (LithosegError, ValueError, OSError, KeyError) as exc:
        return _fail(type(exc).__name__, exc, 1)


if __name__ == "__main__":
    sys.exit(main())
