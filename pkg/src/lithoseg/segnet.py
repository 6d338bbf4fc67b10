"""Encoder-decoder segmentation networks.

One builder covers U-Net, HybResUNet (residual units in the encoder only),
DeepResUNet (residual units everywhere) and R2-UNet (recurrent residual
units), each optionally with attention-gated skips and with a dilation
schedule plus an ASPP module closing the encoder. All variants have nine
levels: four encoder stages, a bottleneck and four decoder stages.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from typing import Optional

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ConfigError, ShapeError

VARIANTS = ("unet", "hybresunet", "deepresunet", "r2unet")
DEFAULT_DILATIONS = [1, 2, 3, 4, 3, 2, 1, 2, 1]
DEFAULT_ASPP_RATES = [1, 2, 4, 8, 16, 32]
_DISPLAY = {"unet": "UNet", "hybresunet": "HybResUNet", "deepresunet": "DeepResUNet",
            "r2unet": "R2-UNet"}


@dataclass
class SegNetConfig:
    variant: str = "hybresunet"
    in_channels: int = 3
    num_classes: int = 3
    base_width: int = 64
    use_attention: bool = False
    use_aspp: bool = False
    encoder_dilation_schedule: Optional[list] = None
    aspp_rates: list = field(default_factory=lambda: list(DEFAULT_ASPP_RATES))
    r2_recurrence: int = 2
    # residual additions of the recurrent units; off only for ablations
    r2_residual: bool = True

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown variant {self.variant!r}; expected one of {VARIANTS}")
        if self.in_channels not in (1, 2, 3):
            raise ConfigError(f"in_channels must be 1, 2 or 3, got {self.in_channels}")
        if self.num_classes != 3:
            raise ConfigError("num_classes is fixed to 3 (background, stone, laser)")
        if self.base_width < 8:
            raise ConfigError(f"base_width must be >= 8, got {self.base_width}")
        if self.encoder_dilation_schedule is not None:
            if len(self.encoder_dilation_schedule) != 9:
                raise ConfigError("dilation schedule needs one rate per level (9)")
            if any(int(d) < 1 for d in self.encoder_dilation_schedule):
                raise ConfigError("dilation rates must be >= 1")
        if self.use_aspp and not self.aspp_rates:
            raise ConfigError("aspp_rates must not be empty")
        if self.r2_recurrence < 1:
            raise ConfigError("r2_recurrence must be >= 1")

    @property
    def dilations(self) -> list[int]:
        if self.encoder_dilation_schedule is not None:
            return [int(d) for d in self.encoder_dilation_schedule]
        return list(DEFAULT_DILATIONS) if self.use_aspp else [1] * 9

    @property
    def name(self) -> str:
        prefix = ("Att-" if self.use_attention else "") + ("ASPP-" if self.use_aspp else "")
        return prefix + _DISPLAY[self.variant]

    @classmethod
    def from_name(cls, name: str, **kw) -> "SegNetConfig":
        """Parse display names such as ``Att-ASPP-HybResUNet``."""
        rest, att, aspp = name, False, False
        if rest.startswith("Att-"):
            att, rest = True, rest[4:]
        if rest.startswith("ASPP-"):
            aspp, rest = True, rest[5:]
        lookup = {v.lower(): k for k, v in _DISPLAY.items()}
        key = lookup.get(rest.lower(), rest.lower())
        return cls(variant=key, use_attention=att, use_aspp=aspp, **kw)

    def to_dict(self) -> dict:
        return asdict(self)


class ConvBNReLU(nn.Sequential):
    def __init__(self, cin, cout, dilation=1):
        super().__init__(
            nn.Conv2d(cin, cout, 3, padding=dilation, dilation=dilation, bias=False),
            nn.BatchNorm2d(cout),
            nn.ReLU(inplace=True),
        )


def _shortcut(cin, cout):
    return nn.Identity() if cin == cout else nn.Conv2d(cin, cout, 1)


class DoubleConv(nn.Module):
    """Two 3x3 conv-BN-ReLU layers, optionally wrapped as a residual unit."""

    kind = "double_conv"

    def __init__(self, cin, cout, dilation=1, residual=False):
        super().__init__()
        self.c1 = ConvBNReLU(cin, cout, dilation)
        self.c2 = ConvBNReLU(cout, cout, dilation)
        self.residual = residual
        self.shortcut = _shortcut(cin, cout) if residual else None

    def forward(self, x):
        out = self.c2(self.c1(x))
        if self.residual:
            out = out + self.shortcut(x)
        return out


class RecurrentConv(nn.Module):
    """Recurrent convolutional layer: u_0 = f(Wx), u_t = f(Wx + R u_{t-1})."""

    def __init__(self, cin, cout, steps=2, dilation=1):
        super().__init__()
        self.ff = nn.Conv2d(cin, cout, 3, padding=dilation, dilation=dilation, bias=False)
        self.bn = nn.BatchNorm2d(cout)
        self.steps = steps
        self.rec = (nn.Conv2d(cout, cout, 3, padding=dilation, dilation=dilation, bias=False)
                    if steps > 1 else None)

    def forward(self, x):
        drive = self.ff(x)
        u = F.relu(self.bn(drive))
        for _ in range(self.steps - 1):
            u = F.relu(self.bn(drive + self.rec(u)))
        return u


class R2Block(nn.Module):
    kind = "recurrent_residual"

    def __init__(self, cin, cout, steps=2, dilation=1, residual=True):
        super().__init__()
        self.r1 = RecurrentConv(cin, cout, steps, dilation)
        self.r2 = RecurrentConv(cout, cout, steps, dilation)
        self.residual = residual
        self.shortcut = _shortcut(cin, cout) if residual else None

    def forward(self, x):
        out = self.r2(self.r1(x))
        if self.residual:
            out = out + self.shortcut(x)
        return out


class AttentionGate(nn.Module):
    """Additive attention on a skip connection.

    ``alpha = sigmoid(psi(relu(W_x skip + W_g gating)))`` and the output is
    ``skip * alpha``. A coarser gating signal is bilinearly resized to the skip.
    """

    def __init__(self, skip_channels, gating_channels, inter_channels=None):
        super().__init__()
        inter = inter_channels or max(skip_channels // 2, 1)
        self.skip_channels = skip_channels
        self.gating_channels = gating_channels
        self.w_x = nn.Sequential(nn.Conv2d(skip_channels, inter, 1, bias=False), nn.BatchNorm2d(inter))
        self.w_g = nn.Sequential(nn.Conv2d(gating_channels, inter, 1), nn.BatchNorm2d(inter))
        self.psi = nn.Conv2d(inter, 1, 1)

    def coefficients(self, skip, gating):
        if skip.ndim != 4 or gating.ndim != 4 or skip.shape[0] != gating.shape[0]:
            raise ShapeError(f"incompatible skip {tuple(skip.shape)} / gating {tuple(gating.shape)}")
        if skip.shape[1] != self.skip_channels or gating.shape[1] != self.gating_channels:
            raise ShapeError("channel counts do not match the gate configuration")
        if gating.shape[2] > skip.shape[2] or gating.shape[3] > skip.shape[3]:
            raise ShapeError("gating signal must not be finer than the skip features")
        g = self.w_g(gating)
        if g.shape[2:] != skip.shape[2:]:
            g = F.interpolate(g, size=skip.shape[2:], mode="bilinear", align_corners=False)
        return torch.sigmoid(self.psi(F.relu(self.w_x(skip) + g)))

    def forward(self, skip, gating):
        return skip * self.coefficients(skip, gating)


def attention_gate(gate: AttentionGate, skip, gating):
    return gate(skip, gating)


class ASPP(nn.Module):
    """Parallel dilated 3x3 convolutions fused by a 1x1 convolution."""

    def __init__(self, cin, cout, rates):
        super().__init__()
        if not rates:
            raise ConfigError("ASPP needs at least one dilation rate")
        self.rates = [int(r) for r in rates]
        self.branches = nn.ModuleList(ConvBNReLU(cin, cout, r) for r in self.rates)
        self.fuse = nn.Conv2d(cout * len(self.rates), cout, 1)

    def forward(self, x):
        return self.fuse(torch.cat([b(x) for b in self.branches], dim=1))


def aspp(features, rates, out_channels=None):
    """Functional helper: build a fresh ASPP for ``features`` and apply it."""
    module = ASPP(features.shape[1], out_channels or features.shape[1], rates).to(features)
    return module(features)


class SegNet(nn.Module):
    def __init__(self, config: SegNetConfig):
        super().__init__()
        config.validate()
        self.config = config
        widths = [config.base_width * 2 ** i for i in range(5)]
        dil = config.dilations
        v = config.variant
        enc_res = v in ("hybresunet", "deepresunet")
        dec_res = v == "deepresunet"

        def block(cin, cout, d, residual):
            if v == "r2unet":
                return R2Block(cin, cout, config.r2_recurrence, d, config.r2_residual)
            return DoubleConv(cin, cout, d, residual)

        self.encoders = nn.ModuleList()
        cin = config.in_channels
        for i in range(4):
            self.encoders.append(block(cin, widths[i], dil[i], enc_res))
            cin = widths[i]
        self.bottleneck = block(widths[3], widths[4], dil[4], dec_res)
        self.aspp = ASPP(widths[4], widths[4], config.aspp_rates) if config.use_aspp else None
        self.ups = nn.ModuleList()
        self.gates = nn.ModuleList() if config.use_attention else None
        self.decoders = nn.ModuleList()
        for k, i in enumerate(reversed(range(4))):
            self.ups.append(nn.ConvTranspose2d(widths[i + 1], widths[i], 2, stride=2))
            if self.gates is not None:
                self.gates.append(AttentionGate(widths[i], widths[i]))
            self.decoders.append(block(2 * widths[i], widths[i], dil[5 + k], dec_res))
        self.head = nn.Conv2d(widths[0], config.num_classes, 1)
        self.widths = widths

    def check_input(self, x):
        if x.ndim != 4 or x.shape[1] != self.config.in_channels:
            raise ShapeError(f"expected (B, {self.config.in_channels}, H, W), got {tuple(x.shape)}")
        if x.shape[2] % 16 or x.shape[3] % 16:
            raise ShapeError(f"spatial size {tuple(x.shape[2:])} is not divisible by 16")

    def logits(self, x):
        self.check_input(x)
        skips = []
        for enc in self.encoders:
            x = enc(x)
            skips.append(x)
            x = F.max_pool2d(x, 2, stride=2)
        x = self.bottleneck(x)
        if self.aspp is not None:
            x = self.aspp(x)
        for k, skip in enumerate(reversed(skips)):
            up = self.ups[k](x)
            if self.gates is not None:
                skip = self.gates[k](skip, up)
            x = self.decoders[k](torch.cat([skip, up], dim=1))
        return self.head(x)

    def forward(self, x):
        """Per-pixel class probabilities, shape (B, 3, H, W)."""
        return torch.softmax(self.logits(x), dim=1)

    def describe(self, input_size: int = 256) -> list[dict]:
        """Layer list with resolutions, rates and residual/attention flags."""
        cfg = self.config
        rows = []
        cin, size = cfg.in_channels, input_size
        for i, enc in enumerate(self.encoders):
            rows.append(dict(level=i + 1, stage="encoder", block=enc.kind, in_channels=cin,
                             out_channels=self.widths[i], resolution=size, dilation=cfg.dilations[i],
                             residual=enc.residual, attention=False, downsample="maxpool2x2/2"))
            cin, size = self.widths[i], size // 2
        rows.append(dict(level=5, stage="bottleneck", block=self.bottleneck.kind, in_channels=cin,
                         out_channels=self.widths[4], resolution=size, dilation=cfg.dilations[4],
                         residual=self.bottleneck.residual, attention=False))
        if self.aspp is not None:
            rows.append(dict(level=5, stage="aspp", block="aspp", in_channels=self.widths[4],
                             out_channels=self.widths[4], resolution=size, rates=self.aspp.rates,
                             output_stride=input_size // size))
        cin = self.widths[4]
        for k, dec in enumerate(self.decoders):
            i = 3 - k
            size *= 2
            rows.append(dict(level=6 + k, stage="decoder", block=dec.kind, in_channels=2 * self.widths[i],
                             out_channels=self.widths[i], resolution=size, dilation=cfg.dilations[5 + k],
                             residual=dec.residual, attention=self.gates is not None,
                             upsample="convtranspose2x2/2"))
        rows.append(dict(stage="head", block="conv1x1+softmax", in_channels=self.widths[0],
                         out_channels=cfg.num_classes, resolution=size))
        return rows

    def describe_json(self, input_size: int = 256) -> str:
        return json.dumps({"name": self.config.name, "config": self.config.to_dict(),
                           "layers": self.describe(input_size)}, indent=2)


def build_segnet(config: SegNetConfig) -> SegNet:
    return SegNet(config)


def count_parameters(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters() if p.requires_grad)
