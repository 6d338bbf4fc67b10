"""Unsupervised deformable registration between grayscale frame pairs.

Convention: a field ``d`` registering ``(source, target)`` satisfies
``warp(target, d)(x) = target(x + d(x)) ~ source(x)``. Channel 0 of a field
is the horizontal displacement (columns), channel 1 the vertical one.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ConfigError, ShapeError


# ---------------------------------------------------------------------------
# resampling primitives


def bilinear_sample(image: torch.Tensor, x: torch.Tensor, y: torch.Tensor,
                    padding: str = "border") -> torch.Tensor:
    """Sample ``image`` (B, C, H, W) at pixel coordinates ``x``, ``y`` (B, *S).

    ``padding="border"`` clamps coordinates to the image; ``"zeros"`` treats
    everything outside as 0. Returns (B, C, *S).
    """
    b, c, h, w = image.shape
    out_shape = x.shape[1:]
    x = x.reshape(b, -1)
    y = y.reshape(b, -1)
    if padding == "border":
        x = x.clamp(0, w - 1)
        y = y.clamp(0, h - 1)
        x0 = x.detach().floor().clamp(max=max(w - 2, 0))
        y0 = y.detach().floor().clamp(max=max(h - 2, 0))
    elif padding == "zeros":
        x0 = x.detach().floor()
        y0 = y.detach().floor()
    else:
        raise ValueError(f"unknown padding {padding!r}")
    wx = (x - x0).unsqueeze(1)
    wy = (y - y0).unsqueeze(1)
    x0, y0 = x0.long(), y0.long()
    x1, y1 = x0 + 1, y0 + 1
    flat = image.reshape(b, c, h * w)
    n = x.shape[1]

    def tap(yi, xi):
        if padding == "border":
            xi, yi = xi.clamp(max=w - 1), yi.clamp(max=h - 1)
            valid = None
        else:
            valid = ((xi >= 0) & (xi < w) & (yi >= 0) & (yi < h)).unsqueeze(1)
            xi, yi = xi.clamp(0, w - 1), yi.clamp(0, h - 1)
        vals = flat.gather(2, (yi * w + xi).view(b, 1, n).expand(b, c, n))
        return vals if valid is None else vals * valid

    top = tap(y0, x0) * (1 - wx) + tap(y0, x1) * wx
    bottom = tap(y1, x0) * (1 - wx) + tap(y1, x1) * wx
    return (top * (1 - wy) + bottom * wy).view(b, c, *out_shape)


def warp(image: torch.Tensor, dvf: torch.Tensor) -> torch.Tensor:
    """Backward bilinear warp ``out(x) = image(x + dvf(x))`` with border clamping.

    ``image`` is (B, C, H, W), ``dvf`` is (B, 2, H, W) in pixels. Differentiable
    with respect to both arguments.
    """
    if image.ndim != 4 or dvf.ndim != 4 or dvf.shape[1] != 2:
        raise ShapeError(f"expected image (B,C,H,W) and dvf (B,2,H,W), got "
                         f"{tuple(image.shape)} and {tuple(dvf.shape)}")
    if image.shape[0] != dvf.shape[0] or image.shape[2:] != dvf.shape[2:]:
        raise ShapeError(f"image {tuple(image.shape)} and dvf {tuple(dvf.shape)} disagree")
    h, w = image.shape[2:]
    ys = torch.arange(h, dtype=dvf.dtype, device=dvf.device).view(1, h, 1)
    xs = torch.arange(w, dtype=dvf.dtype, device=dvf.device).view(1, 1, w)
    return bilinear_sample(image, xs + dvf[:, 0], ys + dvf[:, 1], padding="border")


def _catmull_rom_weights(t: torch.Tensor) -> torch.Tensor:
    """Weights of the four neighbours k-1..k+2 at fractional offset t."""
    t2, t3 = t * t, t * t * t
    return 0.5 * torch.stack([-t + 2 * t2 - t3,
                              2 - 5 * t2 + 3 * t3,
                              t + 4 * t2 - 3 * t3,
                              -t2 + t3], dim=-1)


def catmull_rom_matrix(n: int, factor: int, dtype=torch.float64, device=None) -> torch.Tensor:
    """(n*factor, n) interpolation matrix on pixel centres.

    Samples beyond the border come from linear extrapolation of the two
    outermost samples, so constants and linear ramps are reproduced exactly.
    """
    fine = torch.arange(n * factor, dtype=torch.float64)
    u = (fine + 0.5) / factor - 0.5
    k = torch.floor(u)
    weights = _catmull_rom_weights(u - k)
    mat = torch.zeros(n * factor, n, dtype=torch.float64)
    rows = torch.arange(n * factor)
    for off in range(4):
        j = k.long() + off - 1
        wj = weights[:, off]
        if n == 1:
            mat[:, 0] += wj
            continue
        below = j < 0
        above = j > n - 1
        inside = ~(below | above)
        mat[rows[inside], j[inside]] += wj[inside]
        # ghost j < 0: (1 - j) v0 + j v1
        jb = j[below].double()
        mat[rows[below], 0] += wj[below] * (1 - jb)
        mat[rows[below], 1] += wj[below] * jb
        # ghost j > n-1: (1 + m) v_{n-1} - m v_{n-2}
        m = (j[above] - (n - 1)).double()
        mat[rows[above], n - 1] += wj[above] * (1 + m)
        mat[rows[above], n - 2] -= wj[above] * m
    return mat.to(dtype=dtype, device=device)


def catmull_rom_upsample(field: torch.Tensor, factor: int) -> torch.Tensor:
    """Separable Catmull-Rom upsampling of a displacement field.

    Values are multiplied by ``factor`` because displacements are expressed
    in pixels of the grid they live on.
    """
    if int(factor) != factor or factor < 2:
        raise ValueError(f"upsampling factor must be an integer >= 2, got {factor}")
    factor = int(factor)
    h, w = field.shape[-2:]
    my = catmull_rom_matrix(h, factor, field.dtype, field.device)
    mx = catmull_rom_matrix(w, factor, field.dtype, field.device)
    return factor * torch.matmul(torch.matmul(my, field), mx.t())


# ---------------------------------------------------------------------------
# network


class DeformableConv2d(nn.Module):
    """Deformable convolution with zero padding.

    Each kernel tap samples the input at its regular position plus a learned
    offset (bilinear interpolation). Offsets come from a sibling convolution
    initialized to zero, so a fresh layer behaves like an ordinary convolution.
    Offset channels are ordered (dy, dx) per tap, row-major over the kernel.
    """

    def __init__(self, cin, cout, kernel_size=3):
        super().__init__()
        self.kernel_size = k = kernel_size
        self.offset = nn.Conv2d(cin, 2 * k * k, k, padding=k // 2)
        nn.init.zeros_(self.offset.weight)
        nn.init.zeros_(self.offset.bias)
        self.weight = nn.Parameter(torch.empty(cout, cin, k, k))
        self.bias = nn.Parameter(torch.zeros(cout))
        nn.init.kaiming_uniform_(self.weight, a=math.sqrt(5))

    def forward(self, x):
        b, c, h, w = x.shape
        k = self.kernel_size
        r = k // 2
        off = self.offset(x).view(b, k * k, 2, h, w)
        ys = torch.arange(h, dtype=x.dtype, device=x.device).view(1, 1, h, 1)
        xs = torch.arange(w, dtype=x.dtype, device=x.device).view(1, 1, 1, w)
        ty, tx = torch.meshgrid(torch.arange(-r, r + 1), torch.arange(-r, r + 1), indexing="ij")
        ty = ty.reshape(1, -1, 1, 1).to(x)
        tx = tx.reshape(1, -1, 1, 1).to(x)
        py = ys + ty + off[:, :, 0]
        px = xs + tx + off[:, :, 1]
        cols = bilinear_sample(x, px, py, padding="zeros")  # (B, C, k*k, H, W)
        out = torch.einsum("bckhw,ock->bohw", cols, self.weight.view(-1, c, k * k))
        return out + self.bias.view(1, -1, 1, 1)


@dataclass
class DVFNetConfig:
    widths: tuple = (16, 32, 32)
    refine_width: int = 16
    kernel_size: int = 3
    decoder_factors: tuple = (2, 2, 1)

    def __post_init__(self):
        self.validate()

    def validate(self):
        if len(self.widths) != 3 or any(int(w) < 4 for w in self.widths):
            raise ConfigError(f"DVFNet needs three encoder widths >= 4, got {self.widths}")
        if self.refine_width < 4:
            raise ConfigError("refine_width must be >= 4")
        if self.kernel_size % 2 == 0 or self.kernel_size < 1:
            raise ConfigError("kernel_size must be odd")
        if tuple(self.decoder_factors) != (2, 2, 1):
            raise ConfigError("decoder resampling factors are fixed to (2, 2, 1)")

    def to_dict(self):
        return asdict(self)


def _conv_bn_elu(cin, cout, k=3):
    return nn.Sequential(nn.Conv2d(cin, cout, k, padding=k // 2), nn.BatchNorm2d(cout), nn.ELU())


class DVFNet(nn.Module):
    """Encoder of three convolutions, two average pools and two deformable
    convolutions producing a quarter-resolution field, followed by a
    Catmull-Rom resampler and two refinement stages back to full resolution.
    """

    def __init__(self, config: DVFNetConfig | None = None):
        super().__init__()
        self.config = config = config or DVFNetConfig()
        w1, w2, w3 = (int(w) for w in config.widths)
        k = config.kernel_size
        self.conv1 = _conv_bn_elu(2, w1, k)
        self.conv2 = _conv_bn_elu(w1, w2, k)
        self.conv3 = _conv_bn_elu(w2, w3, k)
        self.deform4 = nn.Sequential(DeformableConv2d(w3, w3, k), nn.BatchNorm2d(w3), nn.ELU())
        self.deform5 = nn.Sequential(DeformableConv2d(w3, w3, k), nn.BatchNorm2d(w3), nn.ELU())
        self.head = nn.Conv2d(w3, 2, 3, padding=1)
        r = config.refine_width
        self.refine1 = nn.Sequential(nn.Conv2d(2 + w2, r, 3, padding=1), nn.ELU())
        self.out1 = nn.Conv2d(r, 2, 3, padding=1)
        self.refine2 = nn.Sequential(nn.Conv2d(2 + w1, r, 3, padding=1), nn.ELU())
        self.out2 = nn.Conv2d(r, 2, 3, padding=1)
        self.zero_output_layers()

    def output_layers(self):
        return [self.head, self.out1, self.out2]

    def zero_output_layers(self):
        """Zero every layer that emits displacement: the field starts at identity."""
        with torch.no_grad():
            for layer in self.output_layers():
                layer.weight.zero_()
                layer.bias.zero_()

    def forward(self, source, target):
        if source.shape != target.shape:
            raise ShapeError(f"source {tuple(source.shape)} and target {tuple(target.shape)} differ")
        if source.ndim != 4 or source.shape[1] != 1:
            raise ShapeError(f"expected single-channel (B,1,H,W) images, got {tuple(source.shape)}")
        if source.shape[2] % 4 or source.shape[3] % 4:
            raise ShapeError("image size must be divisible by 4")
        f1 = self.conv1(torch.cat([source, target], dim=1))
        f2 = self.conv2(F.avg_pool2d(f1, 2))
        f3 = self.conv3(F.avg_pool2d(f2, 2))
        f3 = self.deform5(self.deform4(f3))
        dvf = catmull_rom_upsample(self.head(f3), 2)
        dvf = dvf + self.out1(self.refine1(torch.cat([dvf, f2], dim=1)))
        dvf = catmull_rom_upsample(dvf, 2)
        # last stage resamples by factor 1, i.e. stays on the full grid
        dvf = dvf + self.out2(self.refine2(torch.cat([dvf, f1], dim=1)))
        return dvf

    def describe(self, input_size: int = 256) -> list[dict]:
        w1, w2, w3 = self.config.widths
        s = input_size
        r = self.config.refine_width
        return [
            dict(layer=1, op="conv3x3+bn+elu", out_channels=w1, resolution=s),
            dict(layer=2, op="avgpool2x2", resolution=s // 2),
            dict(layer=3, op="conv3x3+bn+elu", out_channels=w2, resolution=s // 2),
            dict(layer=4, op="avgpool2x2", resolution=s // 4),
            dict(layer=5, op="conv3x3+bn+elu", out_channels=w3, resolution=s // 4),
            dict(layer=6, op="deformconv3x3+bn+elu", out_channels=w3, resolution=s // 4),
            dict(layer=7, op="deformconv3x3+bn+elu", out_channels=w3, resolution=s // 4),
            dict(layer=8, op="conv3x3 -> coarse dvf", out_channels=2, resolution=s // 4),
            dict(layer=9, op="catmull-rom resample", factor=2, resolution=s // 2),
            dict(layer=10, op="conv3x3+elu, conv3x3 residual", out_channels=r, resolution=s // 2),
            dict(layer=11, op="catmull-rom resample", factor=2, resolution=s),
            dict(layer=12, op="conv3x3+elu, conv3x3 residual (factor 1)", out_channels=r, resolution=s),
        ]

    def describe_json(self, input_size: int = 256) -> str:
        return json.dumps({"config": self.config.to_dict(), "layers": self.describe(input_size)}, indent=2)


def build_dvfnet(config: DVFNetConfig | None = None) -> DVFNet:
    return DVFNet(config)


def predict_dvf(net: DVFNet, source: torch.Tensor, target: torch.Tensor):
    """Field registering ``target`` onto ``source`` and the warped target."""
    if source.shape != target.shape:
        raise ShapeError(f"source {tuple(source.shape)} and target {tuple(target.shape)} differ")
    dvf = net(source, target)
    return dvf, warp(target, dvf)
