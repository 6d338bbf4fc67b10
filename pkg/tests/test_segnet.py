import json

import pytest
import torch
import torch.nn as nn

from lithoseg.errors import ConfigError, ShapeError
from lithoseg.segnet import (ASPP, AttentionGate, SegNetConfig, aspp, attention_gate,
                             build_segnet, count_parameters)


def small(variant="hybresunet", **kw):
    kw.setdefault("base_width", 8)
    return SegNetConfig(variant=variant, **kw)


def expected_params(variant, in_ch, base):
    """Parameter count from the layer recipe: 3x3 conv (no bias) + BN per layer,
    1x1 projection with bias on residual paths whose widths change,
    2x2 transposed conv with bias, 1x1 head with bias."""
    w = [base * 2 ** i for i in range(5)]

    def conv_bn(cin, cout):
        return 9 * cin * cout + 2 * cout

    def block(cin, cout, residual):
        n = conv_bn(cin, cout) + conv_bn(cout, cout)
        if residual and cin != cout:
            n += cin * cout + cout
        return n

    enc_res = variant in ("hybresunet", "deepresunet")
    dec_res = variant == "deepresunet"
    total, cin = 0, in_ch
    for i in range(4):
        total += block(cin, w[i], enc_res)
        cin = w[i]
    total += block(w[3], w[4], dec_res)
    for i in reversed(range(4)):
        total += 4 * w[i + 1] * w[i] + w[i]
        total += block(2 * w[i], w[i], dec_res)
    return total + 3 * w[0] + 3


@pytest.mark.parametrize("variant", ["unet", "hybresunet", "deepresunet"])
@pytest.mark.parametrize("base", [8, 64])
def test_parameter_count_matches_recipe(variant, base):
    net = build_segnet(SegNetConfig(variant=variant, base_width=base))
    assert count_parameters(net) == expected_params(variant, 3, base)


def test_hybresunet_has_at_least_unet_params():
    assert expected_params("hybresunet", 3, 64) >= expected_params("unet", 3, 64)
    assert count_parameters(build_segnet(SegNetConfig("hybresunet", base_width=64))) >= \
        count_parameters(build_segnet(SegNetConfig("unet", base_width=64)))


@pytest.mark.parametrize("variant", ["unet", "hybresunet", "deepresunet", "r2unet"])
@pytest.mark.parametrize("att,asp", [(False, False), (True, True)])
def test_forward_shape_and_normalization(variant, att, asp):
    torch.manual_seed(0)
    net = build_segnet(small(variant, use_attention=att, use_aspp=asp)).eval()
    x = torch.rand(2, 3, 64, 64)
    p = net(x)
    assert p.shape == (2, 3, 64, 64)
    assert torch.allclose(p.sum(1), torch.ones(2, 64, 64), atol=1e-5)
    assert p.min() >= 0 and p.max() <= 1


def test_full_size_forward():
    net = build_segnet(SegNetConfig(base_width=8)).eval()
    with torch.no_grad():
        assert net(torch.rand(1, 3, 256, 256)).shape == (1, 3, 256, 256)


def test_invalid_variant():
    with pytest.raises(ConfigError):
        SegNetConfig(variant="vnet")


@pytest.mark.parametrize("kw", [dict(base_width=4), dict(num_classes=4), dict(in_channels=5),
                                dict(encoder_dilation_schedule=[1, 2, 3])])
def test_invalid_config(kw):
    with pytest.raises(ConfigError):
        SegNetConfig(**kw)


def test_input_checks():
    net = build_segnet(small())
    with pytest.raises(ShapeError):
        net(torch.rand(1, 1, 64, 64))
    with pytest.raises(ShapeError):
        net(torch.rand(1, 3, 40, 40))


def test_eval_deterministic():
    net = build_segnet(small(use_aspp=True, use_attention=True)).eval()
    x = torch.zeros(1, 3, 32, 32)
    assert torch.equal(net(x), net(x))


def test_batch_consistency():
    torch.manual_seed(1)
    net = build_segnet(small(use_aspp=True, use_attention=True)).eval()
    x = torch.rand(2, 3, 64, 64)
    with torch.no_grad():
        joint = net(x)
        split = torch.cat([net(x[:1]), net(x[1:])])
    assert torch.allclose(joint, split, atol=1e-6)


def test_r2_single_step_no_residual_equals_unet():
    torch.manual_seed(2)
    unet = build_segnet(small("unet", use_aspp=True)).double()
    r2 = build_segnet(small("r2unet", use_aspp=True, r2_recurrence=1, r2_residual=False)).double()
    src = unet.state_dict()
    # name maps: DoubleConv.c1.{0,1} -> R2Block.r1.{ff,bn}
    mapped = {}
    for key in r2.state_dict():
        k = key.replace("r1.ff.", "c1.0.").replace("r1.bn.", "c1.1.")
        k = k.replace("r2.ff.", "c2.0.").replace("r2.bn.", "c2.1.")
        mapped[key] = src[k]
    r2.load_state_dict(mapped)
    x = torch.rand(2, 3, 32, 32, dtype=torch.float64)
    for mode in ("train", "eval"):
        getattr(unet, mode)()
        getattr(r2, mode)()
        assert torch.allclose(unet(x), r2(x), atol=1e-6)


def _reachable(net, size):
    """Boolean mask per parameter, False for ASPP taps that only ever see padding."""
    masks = {n: torch.ones_like(p, dtype=torch.bool) for n, p in net.named_parameters()}
    if net.aspp is not None:
        side = size // 16
        for i, rate in enumerate(net.aspp.rates):
            if rate >= side:
                w = masks[f"aspp.branches.{i}.0.weight"]
                w[:] = False
                w[:, :, 1, 1] = True
    return torch.cat([m.flatten() for m in masks.values()])


@pytest.mark.parametrize("variant", ["unet", "hybresunet", "deepresunet", "r2unet"])
@pytest.mark.parametrize("att,asp", [(False, False), (True, True)])
def test_gradient_reaches_every_parameter(variant, att, asp):
    torch.manual_seed(3)
    size = 256 if asp else 64
    net = build_segnet(small(variant, use_attention=att, use_aspp=asp))
    x = torch.rand(2, 3, size, size)
    target = torch.randint(0, 3, (2, size, size))
    loss = nn.functional.nll_loss(torch.log(net(x) + 1e-8), target)
    loss.backward()
    grads = torch.cat([p.grad.flatten() for p in net.parameters()])
    assert torch.isfinite(grads).all()
    live = _reachable(net, size)
    assert (grads[live] != 0).float().mean() >= 0.99
    # taps past the bottleneck edge read zero padding only
    assert (grads[~live] == 0).all()


# ---------------------------------------------------------------------------
# structure


def test_nine_levels_and_residual_placement():
    hyb = build_segnet(small("hybresunet")).describe(64)
    deep = build_segnet(small("deepresunet")).describe(64)
    stages = [r["stage"] for r in hyb]
    assert stages.count("encoder") == 4 and stages.count("bottleneck") == 1
    assert stages.count("decoder") == 4
    assert [r["residual"] for r in hyb if r["stage"] == "encoder"] == [True] * 4
    assert [r["residual"] for r in hyb if r["stage"] in ("bottleneck", "decoder")] == [False] * 5
    assert all(r["residual"] for r in deep if r["stage"] in ("encoder", "bottleneck", "decoder"))
    assert [r["resolution"] for r in hyb if "dilation" in r] == [64, 32, 16, 8, 4, 8, 16, 32, 64]


def test_residual_flags_match_modules():
    net = build_segnet(small("hybresunet"))
    assert all(e.residual for e in net.encoders)
    assert not net.bottleneck.residual and not any(d.residual for d in net.decoders)
    assert isinstance(net.encoders[1].shortcut, nn.Conv2d)  # 8 -> 16 channels


def test_dilation_schedule_in_layers():
    net = build_segnet(small(use_aspp=True))
    rows = [r for r in net.describe(256) if "dilation" in r]
    assert [r["dilation"] for r in rows] == [1, 2, 3, 4, 3, 2, 1, 2, 1]
    blocks = list(net.encoders) + [net.bottleneck] + list(net.decoders)
    actual = [b.c1[0].dilation[0] for b in blocks]
    assert actual == [1, 2, 3, 4, 3, 2, 1, 2, 1]
    assert all(b.c2[0].dilation[0] == d for b, d in zip(blocks, actual))
    plain = build_segnet(small())
    assert [b.c1[0].dilation[0] for b in plain.encoders] == [1] * 4


def test_aspp_metadata():
    net = build_segnet(small(use_aspp=True))
    row = next(r for r in net.describe(256) if r["stage"] == "aspp")
    assert row["rates"] == [1, 2, 4, 8, 16, 32]
    assert row["output_stride"] == 16 and row["resolution"] == 16
    desc = json.loads(net.describe_json())
    assert desc["name"] == "ASPP-HybResUNet"


def test_names_round_trip():
    for name in ("UNet", "Att-HybResUNet", "ASPP-DeepResUNet", "Att-ASPP-R2-UNet"):
        assert SegNetConfig.from_name(name).name == name


# ---------------------------------------------------------------------------
# attention gate


def test_gate_forced_open_is_identity():
    gate = AttentionGate(4, 6)
    nn.init.zeros_(gate.psi.weight)
    nn.init.constant_(gate.psi.bias, 50.0)
    skip, g = torch.randn(2, 4, 8, 8), torch.randn(2, 6, 4, 4)
    assert torch.allclose(attention_gate(gate, skip, g), skip, atol=1e-6)


def test_gate_forced_closed_is_zero():
    gate = AttentionGate(4, 6)
    nn.init.zeros_(gate.psi.weight)
    nn.init.constant_(gate.psi.bias, -200.0)
    out = gate(torch.randn(2, 4, 8, 8), torch.randn(2, 6, 8, 8))
    assert torch.allclose(out, torch.zeros_like(out))


def test_gate_never_amplifies():
    torch.manual_seed(4)
    gate = AttentionGate(5, 3)
    skip = torch.randn(3, 5, 16, 16)
    out = gate(skip, torch.randn(3, 3, 8, 8))
    assert (out.abs() <= skip.abs() + 1e-7).all()


def test_gate_shape_errors():
    gate = AttentionGate(4, 6)
    with pytest.raises(ShapeError):
        gate(torch.randn(1, 4, 8, 8), torch.randn(1, 5, 8, 8))
    with pytest.raises(ShapeError):
        gate(torch.randn(1, 4, 8, 8), torch.randn(1, 6, 16, 16))


# ---------------------------------------------------------------------------
# ASPP


def test_aspp_single_rate_is_one_conv_path():
    torch.manual_seed(5)
    m = ASPP(4, 6, [1]).eval()
    x = torch.randn(1, 4, 16, 16)
    branch = m.branches[0]
    expected = m.fuse(branch(x))
    assert torch.allclose(m(x), expected)
    assert branch[0].dilation == (1, 1) and len(m.branches) == 1


def test_aspp_bottleneck_size_preserved():
    out = aspp(torch.randn(1, 8, 16, 16), [1, 2, 4, 8, 16, 32])
    assert out.shape == (1, 8, 16, 16)


def test_aspp_zero_branches_gives_bias():
    m = ASPP(4, 3, [1, 2, 4])
    for b in m.branches:
        nn.init.zeros_(b[0].weight)
    nn.init.zeros_(m.fuse.weight)
    bias = torch.tensor([0.5, -1.0, 2.0])
    m.fuse.bias.data.copy_(bias)
    out = m(torch.randn(2, 4, 16, 16))
    assert torch.allclose(out, bias.view(1, 3, 1, 1).expand_as(out))


def test_aspp_empty_rates():
    with pytest.raises(ConfigError):
        ASPP(4, 4, [])
    with pytest.raises(ConfigError):
        SegNetConfig(use_aspp=True, aspp_rates=[])
