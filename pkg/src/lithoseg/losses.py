"""Differentiable loss components and the compound training objective."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import NamedTuple

import torch
import torch.nn.functional as F

from .errors import ConfigError, ShapeError

PROB_CLAMP = 1e-7


@dataclass
class LossConfig:
    gamma: float = 2.0
    alpha: float = 1.0
    beta: float = 0.5
    zeta: float = 1.0
    theta0: int = 3
    theta: int = 5
    epsilon: float = 1e-3
    boundary_classes: tuple = (1, 2)

    def __post_init__(self):
        self.boundary_classes = tuple(int(c) for c in self.boundary_classes)
        self.validate()

    def validate(self):
        if self.gamma < 0:
            raise ConfigError("gamma must be >= 0")
        for name in ("alpha", "beta", "zeta"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0")
        for name in ("theta0", "theta"):
            v = getattr(self, name)
            if v < 3 or v % 2 == 0:
                raise ConfigError(f"{name} must be odd and >= 3, got {v}")
        if self.epsilon <= 0:
            raise ConfigError("epsilon must be > 0")
        if not self.boundary_classes or any(c not in (0, 1, 2) for c in self.boundary_classes):
            raise ConfigError(f"invalid boundary classes {self.boundary_classes}")

    def to_dict(self):
        d = asdict(self)
        d["boundary_classes"] = list(self.boundary_classes)
        return d


class BoundaryStats(NamedTuple):
    """Per-image, per-class precision, recall and F-measure; NaN where skipped."""

    precision: torch.Tensor
    recall: torch.Tensor
    metric: torch.Tensor


@dataclass
class LossBreakdown:
    focal: torch.Tensor
    boundary: torch.Tensor
    similarity: torch.Tensor
    smoothness: torch.Tensor
    total: torch.Tensor
    boundary_stats: BoundaryStats | None = field(default=None, repr=False)

    FIELDS = ("focal", "boundary", "similarity", "smoothness", "total")

    def as_floats(self) -> dict[str, float]:
        return {k: float(getattr(self, k)) for k in self.FIELDS}


def _check_labels(labels, num_classes):
    if labels.dtype.is_floating_point:
        raise ShapeError("labels must be an integer tensor")
    if labels.numel() and (labels.min() < 0 or labels.max() >= num_classes):
        raise ValueError(f"labels outside 0..{num_classes - 1}")


def focal_loss(probs: torch.Tensor, labels: torch.Tensor, gamma: float = 2.0) -> torch.Tensor:
    """Mean over pixels of ``-(1 - p_y)^gamma * log(p_y)``.

    ``probs`` is (B, C, H, W), ``labels`` is (B, H, W) with integer classes.
    """
    _check_labels(labels, probs.shape[1])
    if labels.shape != probs.shape[:1] + probs.shape[2:]:
        raise ShapeError(f"labels {tuple(labels.shape)} do not match probs {tuple(probs.shape)}")
    p = probs.gather(1, labels.unsqueeze(1).long()).squeeze(1)
    p = p.clamp(PROB_CLAMP, 1 - PROB_CLAMP)
    loss = -torch.log(p)
    if gamma != 0:
        loss = (1 - p) ** gamma * loss
    return loss.mean()


def _max_pool_same(x, k):
    # -inf padding of max_pool equals replicate padding for a max filter
    return F.max_pool2d(x, k, stride=1, padding=k // 2)


def extract_boundary(binary_map: torch.Tensor, theta0: int = 3) -> torch.Tensor:
    """Inner boundary ``pool(1 - y, theta0) - (1 - y)`` of a (soft) binary map.

    Accepts (H, W), (B, H, W) or (B, C, H, W).
    """
    x = binary_map
    squeeze = 0
    while x.ndim < 4:
        x = x.unsqueeze(0)
        squeeze += 1
    inv = 1 - x
    out = _max_pool_same(inv, theta0) - inv
    for _ in range(squeeze):
        out = out.squeeze(0)
    return out


def boundary_loss(probs: torch.Tensor, labels: torch.Tensor, theta0: int = 3, theta: int = 5,
                  boundary_classes=(1, 2)):
    """``1 - mean_c B^c`` with B^c the boundary F-measure, averaged over the batch.

    Zero denominators give P=0, R=0 and B=0; a class whose boundary is empty
    in both prediction and ground truth is left out of the class average.
    Returns ``(loss, BoundaryStats)``.
    """
    _check_labels(labels, probs.shape[1])
    classes = list(boundary_classes)
    pred = probs[:, classes]
    gt = torch.stack([(labels == c) for c in classes], dim=1).to(probs.dtype)

    gt_b = extract_boundary(gt, theta0)
    pd_b = extract_boundary(pred, theta0)
    gt_ext = _max_pool_same(gt_b, theta)
    pd_ext = _max_pool_same(pd_b, theta)

    pd_sum = pd_b.sum(dim=(2, 3))
    gt_sum = gt_b.sum(dim=(2, 3))
    zero = torch.zeros_like(pd_sum)
    precision = torch.where(pd_sum > 0, (pd_b * gt_ext).sum(dim=(2, 3)) / pd_sum.clamp_min(1e-12), zero)
    recall = torch.where(gt_sum > 0, (gt_b * pd_ext).sum(dim=(2, 3)) / gt_sum.clamp_min(1e-12), zero)
    denom = precision + recall
    metric = torch.where(denom > 0, 2 * precision * recall / denom.clamp_min(1e-12), zero)

    present = (pd_sum > 0) | (gt_sum > 0)
    n_present = present.sum(dim=1)
    per_image = torch.where(n_present > 0,
                            1 - (metric * present).sum(dim=1) / n_present.clamp_min(1),
                            torch.zeros_like(n_present, dtype=probs.dtype))
    nan = torch.full_like(metric, float("nan"))
    stats = BoundaryStats(torch.where(present, precision, nan).detach(),
                          torch.where(present, recall, nan).detach(),
                          torch.where(present, metric, nan).detach())
    return per_image.mean(), stats


def _standardize(img, eps):
    flat = img.flatten(1)
    mu = flat.mean(dim=1, keepdim=True)
    var = flat.var(dim=1, unbiased=False, keepdim=True)
    return (flat - mu) / torch.sqrt(var + eps * eps)


def ncc_term(fixed: torch.Tensor, warped: torch.Tensor, epsilon: float = 1e-3) -> torch.Tensor:
    """``1/(2N) sum (z_fixed - z_warped)^2`` per image with z standardized; batch mean."""
    if fixed.shape != warped.shape:
        raise ShapeError(f"shapes differ: {tuple(fixed.shape)} vs {tuple(warped.shape)}")
    if fixed.ndim == 4 and fixed.shape[1] != 1:
        raise ShapeError("similarity loss expects single-channel images")
    if fixed.ndim == 2:
        fixed, warped = fixed.unsqueeze(0), warped.unsqueeze(0)
    diff = _standardize(fixed, epsilon) - _standardize(warped, epsilon)
    n = diff.shape[1]
    return ((diff ** 2).sum(dim=1) / (2 * n)).mean()


def ncc_loss(source_pair, warped_pair, epsilon: float = 1e-3) -> torch.Tensor:
    """Similarity loss summed over the two registration pairs."""
    (i1, i3), (w13, w35) = source_pair, warped_pair
    return ncc_term(i1, w13, epsilon) + ncc_term(i3, w35, epsilon)


def field_smoothness(dvf: torch.Tensor) -> torch.Tensor:
    """Sum of squared forward differences along x and y; batch mean."""
    if dvf.ndim == 3:
        dvf = dvf.unsqueeze(0)
    dx = dvf[..., :, 1:] - dvf[..., :, :-1]
    dy = dvf[..., 1:, :] - dvf[..., :-1, :]
    return ((dx ** 2).flatten(1).sum(1) + (dy ** 2).flatten(1).sum(1)).mean()


def smoothness_loss(dvf_pair) -> torch.Tensor:
    return sum(field_smoothness(d) for d in dvf_pair)


def compound_loss(probs, labels, source_pair=None, warped_pair=None, dvf_pair=None,
                  config: LossConfig | None = None) -> LossBreakdown:
    """``L = focal + alpha*boundary + beta*similarity + zeta*smoothness``.

    Registration terms are zero when their inputs are omitted; components whose
    weight is zero are still reported.
    """
    cfg = config or LossConfig()
    focal = focal_loss(probs, labels, cfg.gamma)
    boundary, stats = boundary_loss(probs, labels, cfg.theta0, cfg.theta, cfg.boundary_classes)
    zero = probs.new_zeros(())
    sim = ncc_loss(source_pair, warped_pair, cfg.epsilon) if warped_pair is not None else zero
    smo = smoothness_loss(dvf_pair) if dvf_pair is not None else zero
    total = focal + cfg.alpha * boundary + cfg.beta * sim + cfg.zeta * smo
    return LossBreakdown(focal, boundary, sim, smo, total, stats)
