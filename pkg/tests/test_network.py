"""Full network: shapes, train/infer structure, BN folding, composite loss."""

import math
from collections import Counter

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sfanet import ops
from sfanet.autograd import Tensor, count_ops, no_grad
from sfanet.nn import BatchNorm2d
from sfanet.network import (
    SfanetConfig,
    SfanetModel,
    fold_batch_norm,
    predict,
    recompute_total,
    total_loss,
)

from conftest import tensor64


def small_model(**kw):
    kw.setdefault("width", 0.25)
    return SfanetModel(SfanetConfig(**kw))


def randomize_bn_stats(model, rng):
    for m in model.modules():
        if isinstance(m, BatchNorm2d):
            c = m.channels
            m.gamma.data[:] = rng.uniform(0.5, 1.5, c)
            m.beta.data[:] = rng.normal(scale=0.2, size=c)
            m.running_mean.data[:] = rng.normal(scale=0.2, size=c)
            m.running_var.data[:] = rng.uniform(0.5, 2.0, c)


@pytest.fixture(scope="module")
def model():
    return small_model().eval()


def image(rng, h=64, w=128, n=1):
    return Tensor(rng.normal(size=(n, 3, h, w)).astype(np.float32))


def test_encoder_shapes_at_quarter_width(model, rng):
    maps = model.encode(image(rng))
    assert [m.shape for m in maps] == [(1, 16, 16, 32), (1, 32, 8, 16), (1, 64, 4, 8), (1, 128, 2, 4)]


def test_stage_channels_scale_with_width():
    assert SfanetConfig(width=1.0).stage_channels == (64, 128, 256, 512)
    assert SfanetConfig(width=0.25).stage_channels == (16, 32, 64, 128)


def test_sca_only_in_later_stages(model):
    assert model.res1.sca is None
    assert all(s.sca is not None for s in (model.res2, model.res3, model.res4))


def test_infer_mode_returns_only_main_logits(model, rng):
    with no_grad():
        out = model(image(rng))
    assert isinstance(out, Tensor) and out.shape == (1, 4, 64, 128)


def test_train_mode_returns_main_and_four_aux(rng):
    m = small_model(num_classes=3).train()
    with no_grad():
        main, aux = m(image(rng, 64, 64, n=2))
    assert main.shape == (2, 3, 64, 64)
    assert len(aux) == 4 and all(a.shape == main.shape for a in aux)


def test_head_input_is_concat_of_sfa1_and_res1(model):
    assert model.head.config.in_channels == 2 * model.config.stage_channels[0]
    assert SfanetModel(SfanetConfig(width=1.0)).head.config.in_channels == 128


def test_op_count_audit(rng):
    m = small_model(num_classes=3).train()
    x = image(rng, 64, 64)
    with no_grad():
        with count_ops() as with_aux:
            m(x)
        with count_ops() as without_aux:
            m(x, aux=(False,) * 4)
        m.eval()
        with count_ops() as infer:
            m(x)
        with count_ops() as one_head:
            m.aux_heads[0](Tensor(np.zeros((1, m.config.stage_channels[0], 16, 16), np.float32)), (64, 64))
    assert infer == without_aux
    diff = with_aux.copy()
    diff.subtract(without_aux)
    assert +diff == Counter({op: 4 * n for op, n in one_head.items()})


@given(st.integers(0, 9))
@settings(max_examples=10)
def test_fold_preserves_logits(seed):
    rng = np.random.default_rng(seed)
    m = small_model(num_classes=3, seed=seed).astype(np.float64).eval()
    randomize_bn_stats(m, rng)
    folded = fold_batch_norm(m)
    x = Tensor(rng.normal(size=(1, 3, 64, 64)))
    with no_grad():
        np.testing.assert_allclose(folded(x).data, m(x).data, rtol=0, atol=1e-5)


def test_fold_removes_every_bn(model):
    folded = fold_batch_norm(model)
    assert not any(isinstance(m, BatchNorm2d) for m in folded.modules())
    assert folded.aux_heads == [] and folded.folded
    assert any(isinstance(m, BatchNorm2d) for m in model.modules())  # original untouched
    with pytest.raises(RuntimeError):
        folded.train()


def test_fold_with_identity_bn_keeps_conv_weights():
    m = small_model(num_classes=2).astype(np.float64).eval()
    for bn in (x for x in m.modules() if isinstance(x, BatchNorm2d)):
        bn.running_var.data[:] = 1.0 - bn.eps  # so 1/sqrt(var + eps) == 1
    w = m.stem.conv.weight.data.copy()
    folded = fold_batch_norm(m)
    np.testing.assert_allclose(folded.stem.conv.weight.data, w, rtol=1e-12)
    assert not folded.stem.conv.bias.data.any()


def test_fold_requires_infer_mode():
    with pytest.raises(RuntimeError):
        fold_batch_norm(small_model().train())


@pytest.mark.parametrize("hw", [(50, 64), (64, 70), (33, 33)])
def test_indivisible_extent_rejected(model, rng, hw):
    with pytest.raises(ValueError, match="divisible by 32"):
        model(image(rng, *hw))


def test_loss_decomposition(rng):
    labels = rng.integers(0, 3, size=(2, 4, 4))
    main = tensor64(rng.normal(size=(2, 3, 4, 4)), grad=True)
    aux = [tensor64(rng.normal(size=(2, 3, 4, 4)), grad=True) for _ in range(4)]
    lambdas = (0.4, 0.0, 1.0, 0.25)
    bundle = total_loss(main, aux, labels, lambdas)
    expected = ops.cross_entropy(main, labels).item() + sum(
        lam * ops.cross_entropy(z, labels).item() for lam, z in zip(lambdas, aux)
    )
    assert bundle.total.item() == pytest.approx(expected, rel=1e-12)
    assert recompute_total(bundle.values(), lambdas) == pytest.approx(bundle.total.item(), rel=1e-12)
    bundle.total.backward()
    assert aux[1].grad is None or not np.any(aux[1].grad)


def test_uniform_logits_loss_is_log_n():
    z = tensor64(np.zeros((1, 19, 3, 3)))
    bundle = total_loss(z, [z] * 4, np.zeros((1, 3, 3), int), (1.0, 1.0, 1.0, 1.0))
    assert bundle.principal.item() == pytest.approx(math.log(19), rel=1e-12)
    assert bundle.total.item() == pytest.approx(5 * math.log(19), rel=1e-12)


def test_perfect_logits_give_near_zero_loss():
    labels = np.array([[[0, 1], [2, 1]]])
    z = np.full((1, 3, 2, 2), -50.0)
    for c in range(3):
        z[0, c][labels[0] == c] = 50.0
    bundle = total_loss(tensor64(z), [None] * 4, labels, (0.0,) * 4)
    assert bundle.total.item() < 1e-30


def test_nonzero_weight_needs_head():
    z = tensor64(np.zeros((1, 2, 2, 2)))
    with pytest.raises(ValueError):
        total_loss(z, [None] * 4, np.zeros((1, 2, 2), int), (0.0, 0.0, 1.0, 0.0))


def test_predict_ties_resolve_to_lowest_class(rng):
    m = small_model(num_classes=3).eval()
    m = fold_batch_norm(m)
    m.head.classifier.weight.data[:] = 0
    m.head.classifier.bias.data[:] = 0
    labels = predict(m, image(rng, 64, 64))
    assert labels.dtype == np.uint8 and not labels.any()


@pytest.mark.parametrize("width", [0.0001, 0.01])
def test_degenerate_width_rejected(width):
    with pytest.raises(ValueError):
        SfanetConfig(width=width)
