"""Decoder blocks: CBR, FEB-2/3/4, SCA, FAA, SFA and the segmentation head."""

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from sfanet import ops
from sfanet.autograd import no_grad
from sfanet.blocks import (
    CBR,
    FAA,
    FEB,
    SCA,
    SFA,
    FaaConfig,
    FebVariant,
    ScaConfig,
    SegHead,
    SegHeadConfig,
    SfaConfig,
    eca_kernel_size,
)
from sfanet.nn import BatchNorm2d

from conftest import tensor64


def f64(module, training=False):
    module.astype(np.float64)
    return module.train(training)


def randomize_bn(module, rng):
    for m in module.modules():
        if isinstance(m, BatchNorm2d):
            c = m.channels
            m.gamma.data[:] = rng.uniform(0.5, 1.5, c)
            m.beta.data[:] = rng.normal(scale=0.3, size=c)
            m.running_mean.data[:] = rng.normal(scale=0.3, size=c)
            m.running_var.data[:] = rng.uniform(0.5, 2.0, c)


# ---------------------------------------------------------------------------
# golden parameter counts (pure functions of the config)


@pytest.mark.parametrize(
    "make,expected",
    [
        (lambda: CBR(128, 64), 9 * 128 * 64 + 2 * 64),  # 73856
        (lambda: FEB(FebVariant("FEB2", 16)), 2 * (9 * 16 * 16 + 2 * 16)),  # 4672
        (lambda: FEB(FebVariant("FEB3", 16)), 4 * 16 * 16 + 22 * 16),  # 1376
        (lambda: FEB(FebVariant("FEB4", 64)), 4 * 64 * 64 + 22 * 64),  # 17792
        (lambda: SCA(64), 3 + 64 + 1),  # ECA k=3, 1x1 conv C->1 with bias
        (lambda: SCA(256), 5 + 256 + 1),
        (lambda: FAA(FaaConfig(32)), 36 * 32 + 2 + (3 + 32 + 1)),
        (lambda: SegHead(SegHeadConfig(32, 19)), 9 * 32 * 64 + 2 * 64 + 9 * 64 * 19 + 19),
    ],
)
def test_golden_parameter_counts(make, expected):
    assert make().num_parameters() == expected


def test_golden_counts_literal():
    assert CBR(128, 64).num_parameters() == 73856
    assert FEB(FebVariant("FEB2", 16)).num_parameters() == 4672
    assert FEB(FebVariant("FEB3", 16)).num_parameters() == 1376
    assert FEB(FebVariant("FEB4", 64)).num_parameters() == 17792
    assert SegHead(SegHeadConfig(32, 19)).num_parameters() == 29523


@pytest.mark.parametrize("stage", [1, 2, 3, 4])
def test_sfa_count_is_sum_of_parts(stage):
    sfa = SFA(SfaConfig(stage, 16, 32))
    parts = (sfa.feb.num_parameters() if sfa.feb else 0) + sfa.sca.num_parameters()
    parts += sfa.low_cbr.num_parameters() + sfa.faa.num_parameters()
    assert sfa.num_parameters() == parts


# ---------------------------------------------------------------------------
# CBR


def test_cbr_zero_weights_give_zero_output(rng):
    cbr = f64(CBR(3, 4, rng))
    cbr.unit.conv.weight.data[:] = 0
    y = cbr(tensor64(rng.normal(size=(2, 3, 5, 5))))
    assert not y.data.any()


def test_cbr_halves_channels_keeps_extent(rng):
    y = CBR(128, 64, rng).eval()(ops_f32(rng, (1, 128, 6, 5)))
    assert y.shape == (1, 64, 6, 5)


def ops_f32(rng, shape):
    from sfanet.autograd import Tensor

    return Tensor(rng.normal(size=shape).astype(np.float32))


@pytest.mark.parametrize("training", [False, True])
def test_cbr_equals_composition(rng, training):
    cbr = f64(CBR(3, 5, rng), training)
    randomize_bn(cbr, rng)
    x = tensor64(rng.normal(size=(2, 3, 6, 6)))
    bn = cbr.unit.bn
    ref = ops.relu(
        ops.batch_norm(
            ops.conv2d(x, cbr.unit.conv.weight, padding=1), bn.gamma, bn.beta,
            bn.running_mean.data.copy(), bn.running_var.data.copy(), training,
        )
    )
    np.testing.assert_allclose(cbr(x).data, ref.data, rtol=1e-12, atol=1e-12)


# ---------------------------------------------------------------------------
# FEB


@pytest.mark.parametrize("kind", ["FEB2", "FEB3", "FEB4"])
def test_feb_shape_preserving(rng, kind):
    feb = f64(FEB(FebVariant(kind, 6), rng))
    x = tensor64(rng.normal(size=(2, 6, 16, 16)))
    assert feb(x).shape == x.shape


def test_feb_dilations():
    assert FEB(FebVariant("FEB4", 4)).dilations == (2, 5)
    assert FEB(FebVariant("FEB3", 4)).dilations == (1, 1)
    assert FEB(FebVariant("FEB2", 4)).dilations is None


@pytest.mark.parametrize("kind", ["FEB2", "FEB3", "FEB4"])
def test_feb_dead_branch_is_relu(rng, kind):
    feb = f64(FEB(FebVariant(kind, 4), rng))
    for name, p in feb.named_parameters():
        if name.endswith("weight"):
            p.data[:] = 0
    x = rng.normal(size=(1, 4, 8, 8))
    np.testing.assert_array_equal(feb(tensor64(x)).data, np.maximum(x, 0))


def test_feb4_concat_has_2c_channels(rng):
    feb = f64(FEB(FebVariant("FEB4", 5), rng))
    assert feb.fuse.conv.spec.in_channels == 10
    seen = {}
    original = ops.concat_channels

    def spy(*xs):
        out = original(*xs)
        seen["shape"] = out.shape
        return out

    import sfanet.blocks as blocks

    blocks.ops.concat_channels = spy
    try:
        feb(tensor64(rng.normal(size=(1, 5, 8, 8))))
    finally:
        blocks.ops.concat_channels = original
    assert seen["shape"][1] == 10


def test_feb2_has_no_activation_between_convs(rng):
    feb = f64(FEB(FebVariant("FEB2", 3), rng))
    # first conv+BN produces strictly negative values
    feb.conv_a.conv.weight.data[:] = 0
    feb.conv_a.bn.beta.data[:] = -1.0
    seen = []
    original = feb.conv_b.forward
    feb.conv_b.forward = lambda x: (seen.append(x.data.copy()), original(x))[1]
    feb(tensor64(rng.normal(size=(1, 3, 4, 4))))
    assert (seen[0] < 0).all()


@given(st.sampled_from(["FEB3", "FEB4"]))
def test_feb_fold_preserves_output(kind):
    rng = np.random.default_rng(7)
    feb = f64(FEB(FebVariant(kind, 4), rng))
    randomize_bn(feb, rng)
    x = tensor64(rng.normal(size=(1, 4, 10, 10)))
    before = feb(x).data
    from sfanet.nn import fold_module_tree

    fold_module_tree(feb)
    feb.fold()
    assert not any(isinstance(m, BatchNorm2d) for m in feb.modules())
    np.testing.assert_allclose(feb(x).data, before, rtol=1e-10, atol=1e-10)


# ---------------------------------------------------------------------------
# SCA


@pytest.mark.parametrize("channels,k", [(64, 3), (256, 5), (2, 1), (128, 5), (512, 5), (16, 3)])
def test_eca_kernel_size(channels, k):
    assert eca_kernel_size(channels) == k
    assert ScaConfig(channels).kernel_size == k


@given(st.integers(1, 4096))
def test_eca_kernel_size_is_odd_and_monotone(c):
    k = eca_kernel_size(c)
    assert k % 2 == 1 and k >= 1
    assert eca_kernel_size(2 * c) >= k


@given(st.integers(1, 2), st.integers(1, 9), st.integers(1, 5), st.integers(1, 5))
def test_sca_zero_gates_identity(n, c, h, w):
    rng = np.random.default_rng(c * 31 + h)
    sca = f64(SCA(c, rng))
    sca.zero_gates()
    x = rng.normal(size=(n, c, h, w))
    y = sca(tensor64(x))
    assert y.shape == x.shape
    np.testing.assert_allclose(y.data, x, rtol=0, atol=1e-6)


def test_sca_equals_hand_composition(rng):
    sca = f64(SCA(8, rng))
    sca.spatial.bias.data[:] = 0.3
    x = rng.normal(size=(2, 8, 4, 5))
    k = sca.channel_weight.data
    pooled = np.pad(x.mean(axis=(2, 3)), ((0, 0), (1, 1)))
    channel = np.stack([sum(k[j] * pooled[:, i + j] for j in range(3)) for i in range(8)], axis=1)
    cg = 1 / (1 + np.exp(-channel))[:, :, None, None]
    spatial = np.einsum("oc,nchw->nohw", sca.spatial.weight.data[:, :, 0, 0], x) + 0.3
    sg = 1 / (1 + np.exp(-spatial))
    np.testing.assert_allclose(sca(tensor64(x)).data, cg * x + sg * x, rtol=1e-12, atol=1e-12)


# ---------------------------------------------------------------------------
# FAA / SFA


def test_faa_zero_flow_reduces_to_addition(rng):
    faa = f64(FAA(FaaConfig(4), rng))
    high, low = rng.normal(size=(2, 4, 6, 6)), rng.normal(size=(2, 4, 6, 6))
    assert not faa.predict_flow(tensor64(high), tensor64(low)).data.any()
    y = faa(tensor64(high), tensor64(low))
    assert y.shape == high.shape
    np.testing.assert_allclose(y.data, faa.sca(tensor64(high + low)).data, rtol=0, atol=0)


def test_faa_constant_flow_matches_shift_oracle(rng):
    faa = f64(FAA(FaaConfig(2), rng))
    faa.flow.bias.data[:] = [1.0, 0.0]  # weights are zero: flow is (dx=1, dy=0) everywhere
    faa.sca.zero_gates()
    high, low = np.zeros((1, 2, 3, 4)), rng.normal(size=(1, 2, 3, 4))
    shifted = np.concatenate([low[..., 1:], low[..., 3:]], axis=-1)
    np.testing.assert_allclose(faa(tensor64(high), tensor64(low)).data, shifted, rtol=0, atol=1e-12)


def test_sfa_stage_structure():
    assert SFA(SfaConfig(1, 8, 8)).feb is None
    for stage, kind in [(2, "FEB2"), (3, "FEB3"), (4, "FEB4")]:
        assert SFA(SfaConfig(stage, 8, 16)).feb.kind == kind


@pytest.mark.parametrize("stage", [1, 2, 3, 4])
def test_sfa_output_matches_high_shape(rng, stage):
    sfa = f64(SFA(SfaConfig(stage, 4, 6), rng))
    y = sfa(tensor64(rng.normal(size=(2, 4, 12, 12))), tensor64(rng.normal(size=(2, 6, 6, 6))))
    assert y.shape == (2, 4, 12, 12)


def test_sfa_gap_input_is_spread_uniformly(rng):
    sfa = f64(SFA(SfaConfig(4, 4, 8), rng))
    low = tensor64(rng.normal(size=(1, 8, 1, 1)))
    resized = ops.bilinear_resize(sfa.low_cbr(low), 6, 6).data
    assert resized.shape == (1, 4, 6, 6)
    np.testing.assert_allclose(resized, np.broadcast_to(resized[:, :, :1, :1], resized.shape), rtol=0, atol=0)


# ---------------------------------------------------------------------------
# segmentation head


def test_head_defaults():
    assert SegHeadConfig(32, 4).mid_channels == 64
    head = SegHead(SegHeadConfig(32, 19)).eval()
    y = head(ops_f32(np.random.default_rng(0), (1, 32, 4, 4)), (16, 16))
    assert y.shape == (1, 19, 16, 16)


def test_head_zero_classifier_gives_uniform_softmax(rng):
    head = f64(SegHead(SegHeadConfig(6, 5, 8), rng))
    head.classifier.weight.data[:] = 0
    head.classifier.bias.data[:] = 0
    with no_grad():
        z = head(tensor64(rng.normal(size=(1, 6, 4, 4))), (8, 8))
    assert not z.data.any()
    np.testing.assert_allclose(ops.softmax_channels(z).data, 0.2, rtol=1e-15)
