"""Training and inference for the motion-aware segmentation framework.

Training wires two registration networks and two segmentation networks:

* DVFNet-A registers frame 3 onto frame 1, DVFNet-B frame 5 onto frame 3
  (grayscale inputs);
* branch 1 segments the mean of the two fields (``dvf_input``) or of the two
  warped images (``warped_input``);
* branch 2 segments frame 5 in RGB;
* the two probability maps are averaged and scored with the compound loss.

Frame-wise inference runs branch 2 alone.
"""

from __future__ import annotations

import contextlib
import copy
import csv
import dataclasses
import io
import json
import logging
import os
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
import torch
import torch.nn as nn

from .data.augment import AugmentationPolicy, augment
from .data.io import load_clip_dataset
from .data.types import ClipSequence, to_grayscale
from .dvfnet import DVFNet, DVFNetConfig, predict_dvf
from .errors import BundleCorruptError, BundleVersionError, ConfigError, ShapeError
from .losses import LossBreakdown, LossConfig, compound_loss
from .metrics import argmax_labels, evaluate
from .segnet import SegNet, SegNetConfig

log = logging.getLogger(__name__)

WIRINGS = ("dvf_input", "warped_input")
BUNDLE_FORMAT = "lithoseg-bundle"
BUNDLE_VERSION = 1
LOSS_COLUMNS = ("step", "focal", "boundary", "similarity", "smoothness", "total")
VAL_COLUMNS = ("epoch", "dsc_stone", "dsc_laser", "ji_stone", "ji_laser", "mean_dsc", "mean")


@dataclass
class PipelineConfig:
    """Everything needed to rebuild and retrain the framework.

    Defaults are the full-scale protocol (batch 2, Adam 1e-3, 100 epochs,
    64 channels at level 1); :meth:`desk_scale` gives the reduced setting.
    """

    wiring: str = "dvf_input"
    segnet: SegNetConfig = field(default_factory=SegNetConfig)
    dvfnet: DVFNetConfig = field(default_factory=DVFNetConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    lr: float = 1e-3
    betas: tuple = (0.9, 0.999)
    batch_size: int = 2
    epochs: int = 100
    seed: int = 0
    augmentation: str = "rbc_equalize"
    # False trains branch 2 alone on frame 5 (no registration, no sequence input)
    use_dvfnet: bool = True
    detach_branch1_input: bool = False
    deterministic: bool = True
    workers: int = 0

    def __post_init__(self):
        self.betas = tuple(self.betas)
        self.validate()

    def validate(self):
        if self.wiring not in WIRINGS:
            raise ConfigError(f"wiring must be one of {WIRINGS}, got {self.wiring!r}")
        if self.batch_size < 1 or self.epochs < 1:
            raise ConfigError("batch_size and epochs must be >= 1")
        if self.lr <= 0:
            raise ConfigError("lr must be > 0")
        AugmentationPolicy.preset(self.augmentation)
        self.segnet.validate()
        self.dvfnet.validate()
        self.loss.validate()

    @property
    def branch1_channels(self) -> int:
        return 2 if self.wiring == "dvf_input" else 1

    def branch_configs(self) -> tuple[SegNetConfig, SegNetConfig]:
        b1 = dataclasses.replace(self.segnet, in_channels=self.branch1_channels)
        b2 = dataclasses.replace(self.segnet, in_channels=3)
        return b1, b2

    @classmethod
    def desk_scale(cls, **kw) -> "PipelineConfig":
        kw.setdefault("segnet", SegNetConfig(base_width=32))
        kw.setdefault("epochs", 15)
        return cls(**kw)

    def to_dict(self) -> dict:
        d = {f.name: getattr(self, f.name) for f in dataclasses.fields(self)}
        d["segnet"] = self.segnet.to_dict()
        d["dvfnet"] = self.dvfnet.to_dict()
        d["loss"] = self.loss.to_dict()
        d["betas"] = list(self.betas)
        return json.loads(json.dumps(d))

    @classmethod
    def from_dict(cls, data: dict) -> "PipelineConfig":
        data = dict(data)
        nested = {"segnet": SegNetConfig, "dvfnet": DVFNetConfig, "loss": LossConfig}
        _reject_unknown(cls, data, "pipeline")
        for key, sub in nested.items():
            if key in data and not isinstance(data[key], sub):
                _reject_unknown(sub, data[key], key)
                data[key] = sub(**data[key])
        if "dvfnet" in data:
            data["dvfnet"].widths = tuple(data["dvfnet"].widths)
            data["dvfnet"].decoder_factors = tuple(data["dvfnet"].decoder_factors)
        return cls(**data)


def _reject_unknown(cls, data, where):
    if not isinstance(data, dict):
        raise ConfigError(f"{where} section must be a mapping")
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - known)
    if unknown:
        raise ConfigError(f"unknown {where} keys: {unknown}")


class MotionSegFramework(nn.Module):
    def __init__(self, config: PipelineConfig):
        super().__init__()
        self.config = config
        b1, b2 = config.branch_configs()
        self.seg2 = SegNet(b2)
        if config.use_dvfnet:
            self.seg1 = SegNet(b1)
            self.dvf_a = DVFNet(config.dvfnet)
            self.dvf_b = DVFNet(config.dvfnet)
        else:
            self.seg1 = self.dvf_a = self.dvf_b = None

    def forward(self, frames: torch.Tensor) -> dict:
        """``frames`` is (B, 5, 3, H, W); returns the averaged map and intermediates."""
        if frames.ndim != 5 or frames.shape[1] != 5 or frames.shape[2] != 3:
            raise ShapeError(f"expected clip batch (B, 5, 3, H, W), got {tuple(frames.shape)}")
        rgb5 = frames[:, 4]
        p2 = self.seg2(rgb5)
        if not self.config.use_dvfnet:
            return {"probs": p2, "p2": p2}
        gray = to_grayscale(frames)  # (B, 5, 1, H, W)
        i1, i3, i5 = gray[:, 0], gray[:, 2], gray[:, 4]
        dvf13, w13 = predict_dvf(self.dvf_a, i1, i3)
        dvf35, w35 = predict_dvf(self.dvf_b, i3, i5)
        if self.config.wiring == "dvf_input":
            x1 = (dvf13 + dvf35) / 2
        else:
            x1 = (w13 + w35) / 2
        if self.config.detach_branch1_input:
            x1 = x1.detach()
        p1 = self.seg1(x1)
        return {"probs": (p1 + p2) / 2, "p1": p1, "p2": p2, "sources": (i1, i3),
                "warped": (w13, w35), "dvfs": (dvf13, dvf35), "branch1_input": x1}


@dataclass
class TrainedBundle:
    config: PipelineConfig
    framework: MotionSegFramework
    seed: int = 0
    best_epoch: int = -1
    mode: str = "deterministic"
    workers: int = 0
    history: list = field(default_factory=list)
    loss_history: list = field(default_factory=list, repr=False)
    optimizer: Optional[torch.optim.Optimizer] = field(default=None, repr=False)

    @property
    def inference_net(self) -> SegNet:
        return self.framework.seg2

    def get_optimizer(self) -> torch.optim.Optimizer:
        if self.optimizer is None:
            self.optimizer = torch.optim.Adam(self.framework.parameters(), lr=self.config.lr,
                                              betas=self.config.betas)
        return self.optimizer


def new_bundle(config: PipelineConfig) -> TrainedBundle:
    """Fresh, seeded framework (weights depend only on ``config.seed``)."""
    configure_determinism(config.deterministic)
    torch.manual_seed(config.seed)
    framework = MotionSegFramework(config)
    return TrainedBundle(config=config, framework=framework, seed=config.seed,
                         mode=_mode_name(config.deterministic), workers=config.workers)


def _mode_name(deterministic: bool) -> str:
    return "deterministic" if deterministic else "nondeterministic"


def configure_determinism(enabled: bool) -> None:
    torch.use_deterministic_algorithms(enabled, warn_only=True)


def collate(clips: list[ClipSequence], dtype=torch.float32):
    """Stack clips into ``(frames (B,5,3,H,W), masks (B,H,W) int64)``."""
    frames = torch.from_numpy(np.stack([c.frames for c in clips])).permute(0, 1, 4, 2, 3)
    masks = torch.from_numpy(np.stack([c.mask for c in clips]).astype(np.int64))
    return frames.to(dtype).contiguous(), masks


def compute_loss(bundle: TrainedBundle, frames, masks, outputs=None) -> LossBreakdown:
    out = outputs if outputs is not None else bundle.framework(frames)
    return compound_loss(out["probs"], masks, out.get("sources"), out.get("warped"),
                         out.get("dvfs"), bundle.config.loss)


def train_step(bundle: TrainedBundle, batch) -> LossBreakdown:
    """One joint optimizer step over all networks; ``batch`` is clips or collated tensors."""
    frames, masks = collate(batch) if isinstance(batch, (list, tuple)) and batch and \
        isinstance(batch[0], ClipSequence) else batch
    bundle.framework.train()
    opt = bundle.get_optimizer()
    opt.zero_grad(set_to_none=True)
    losses = compute_loss(bundle, frames, masks)
    losses.total.backward()
    opt.step()
    return LossBreakdown(*(getattr(losses, k).detach() for k in LossBreakdown.FIELDS),
                         losses.boundary_stats)


def _val_row(epoch: int, report) -> dict:
    m = report.class_means()
    return {"epoch": epoch, "dsc_stone": m["stone"]["dsc"], "dsc_laser": m["laser"]["dsc"],
            "ji_stone": m["stone"]["ji"], "ji_laser": m["laser"]["ji"],
            "mean_dsc": report.mean_dsc(), "mean": report.mean_dsc_ji()}


def _write_csv(path, columns, rows):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=columns)
        writer.writeheader()
        for row in rows:
            writer.writerow({k: (repr(float(v)) if isinstance(v, float) else v) for k, v in row.items()})


def train(config: PipelineConfig, dataset_root=None, out_dir=None, datasets: dict | None = None,
          progress=None) -> TrainedBundle:
    """Train for ``config.epochs`` epochs and return the best-validation bundle.

    Data comes from ``dataset_root`` (train/ and val/ splits) or from
    ``datasets={"train": [...], "val": [...]}``. When ``out_dir`` is given,
    ``losses.csv`` and ``val_metrics.csv`` are written there.
    """
    if datasets is None:
        if dataset_root is None:
            raise ValueError("either dataset_root or datasets is required")
        datasets = {s: load_clip_dataset(dataset_root, s, workers=max(config.workers, 1))
                    for s in ("train", "val")}
    train_set, val_set = list(datasets.get("train", [])), list(datasets.get("val", []))
    if not train_set or not val_set:
        raise ValueError("training needs non-empty train and val splits")

    bundle = new_bundle(config)
    policy = AugmentationPolicy.preset(config.augmentation)
    rng = np.random.default_rng(config.seed)
    loss_rows, val_rows = [], []
    best_score, best_state = -np.inf, None
    step = 0
    for epoch in range(config.epochs):
        order = rng.permutation(len(train_set))
        for start in range(0, len(order), config.batch_size):
            idx = order[start:start + config.batch_size]
            clips = [augment(train_set[i], policy, int(rng.integers(2 ** 31))) for i in idx]
            losses = train_step(bundle, clips)
            step += 1
            loss_rows.append({"step": step, **losses.as_floats()})
        report = evaluate(bundle.inference_net, val_set)
        row = _val_row(epoch, report)
        val_rows.append(row)
        if progress is not None:
            progress(row)
        log.info("epoch %d: val mean(DSC,JI)=%.4f", epoch, row["mean"])
        if row["mean"] > best_score:
            best_score = row["mean"]
            best_state = copy.deepcopy(bundle.framework.state_dict())
            bundle.best_epoch = epoch
    bundle.framework.load_state_dict(best_state)
    bundle.history = val_rows
    bundle.framework.eval()
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        _write_csv(out / "losses.csv", LOSS_COLUMNS, loss_rows)
        _write_csv(out / "val_metrics.csv", VAL_COLUMNS, val_rows)
    bundle.loss_history = loss_rows
    return bundle


# ---------------------------------------------------------------------------
# inference


def _frame_tensor(frame, dtype) -> torch.Tensor:
    if isinstance(frame, torch.Tensor):
        x = frame
        if x.ndim == 3 and x.shape[0] == 3:
            x = x.unsqueeze(0)
        elif x.ndim == 3 and x.shape[-1] == 3:
            x = x.permute(2, 0, 1).unsqueeze(0)
    else:
        arr = np.asarray(frame)
        if arr.ndim != 3 or arr.shape[-1] != 3:
            raise ShapeError(f"expected an (H, W, 3) RGB frame, got {arr.shape}")
        x = torch.from_numpy(np.ascontiguousarray(arr)).permute(2, 0, 1).unsqueeze(0)
    if x.ndim != 4 or x.shape[1] != 3:
        raise ShapeError(f"expected an RGB frame, got shape {tuple(x.shape)}")
    return x.to(dtype)


def infer_frame(bundle: TrainedBundle, frame):
    """Segment one RGB frame with the branch-2 network only.

    Returns ``(mask (H, W) uint8, probs (3, H, W) float32)``.
    """
    net = bundle.inference_net
    net.eval()
    x = _frame_tensor(frame, next(net.parameters()).dtype)
    with torch.no_grad():
        probs = net(x)
    mask = argmax_labels(probs)[0].numpy().astype(np.uint8)
    return mask, probs[0].float().numpy()


@contextlib.contextmanager
def count_calls(bundle: TrainedBundle):
    """Count forward calls of every network of the framework while active."""
    counts = {"seg1": 0, "seg2": 0, "dvf_a": 0, "dvf_b": 0}
    handles = []
    for name in counts:
        module = getattr(bundle.framework, name)
        if module is None:
            continue

        def hook(_mod, _inp, name=name):
            counts[name] += 1

        handles.append(module.register_forward_pre_hook(hook))
    try:
        yield counts
    finally:
        for h in handles:
            h.remove()


def benchmark_inference(bundle: TrainedBundle, n: int = 10, frame=None, warmup: int = 3) -> dict:
    """Wall-clock time of ``n`` sequential :func:`infer_frame` calls after warm-up."""
    if n < 1:
        raise ValueError("n must be >= 1")
    if frame is None:
        frame = np.random.default_rng(0).random((256, 256, 3), dtype=np.float32)
    for _ in range(warmup):
        infer_frame(bundle, frame)
    start = time.perf_counter()
    for _ in range(n):
        infer_frame(bundle, frame)
    seconds = time.perf_counter() - start
    return {"network": bundle.inference_net.config.name, "n": n, "seconds": seconds,
            "fps": n / seconds}


def format_timing(result: dict) -> str:
    """Two-column table: network and computation time for ``n`` images."""
    head = f"{'Network':<24}| Computation time for {result['n']} images (secs)"
    return f"{head}\n{result['network']:<24}| {result['seconds']:.4f}\nFPS: {result['fps']:.2f}"


# ---------------------------------------------------------------------------
# checkpoints


def save_bundle(bundle: TrainedBundle, path) -> None:
    payload = {
        "format": BUNDLE_FORMAT,
        "version": BUNDLE_VERSION,
        "config": json.dumps(bundle.config.to_dict(), sort_keys=True),
        "meta": json.dumps({"seed": bundle.seed, "best_epoch": bundle.best_epoch,
                            "mode": bundle.mode, "workers": bundle.workers,
                            "history": bundle.history}),
        "weights": {k: v.detach().clone() for k, v in bundle.framework.state_dict().items()},
    }
    buf = io.BytesIO()
    torch.save(payload, buf)
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(buf.getvalue())
    os.replace(tmp, path)


def load_bundle(path) -> TrainedBundle:
    try:
        payload = torch.load(path, map_location="cpu", weights_only=True)
    except FileNotFoundError:
        raise
    except Exception as exc:
        raise BundleCorruptError(f"cannot read bundle {path}: {exc}") from exc
    if not isinstance(payload, dict) or payload.get("format") != BUNDLE_FORMAT:
        raise BundleCorruptError(f"{path} is not a {BUNDLE_FORMAT} file")
    if payload.get("version") != BUNDLE_VERSION:
        raise BundleVersionError(f"bundle version {payload.get('version')!r} is not supported "
                                 f"(expected {BUNDLE_VERSION})")
    try:
        config = PipelineConfig.from_dict(json.loads(payload["config"]))
        meta = json.loads(payload["meta"])
        framework = MotionSegFramework(config)
        framework.load_state_dict(payload["weights"], strict=True)
    except (KeyError, ValueError, RuntimeError, TypeError) as exc:
        raise BundleCorruptError(f"bundle {path} is inconsistent: {exc}") from exc
    framework.eval()
    return TrainedBundle(config=config, framework=framework, seed=meta["seed"],
                         best_epoch=meta["best_epoch"], mode=meta["mode"], workers=meta["workers"],
                         history=meta.get("history", []))
