"""Registry of float64 gradient checks: one entry per differentiable op, then blocks.

Each case builds its own inputs from a fixed seed and returns a
:class:`GradCheckReport`. Op cases probe every coordinate; block and model
cases sample parameter coordinates to keep the suite within minutes.
"""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import ops
from .autograd import Parameter, Tensor
from .blocks import FAA, FEB, SCA, SFA, FaaConfig, FebVariant, ScaConfig, SegHead, SegHeadConfig, SfaConfig
from .gradcheck import GradCheckReport, finite_difference_check
from .network import SfanetConfig, SfanetModel, total_loss

OP_TOLERANCE = 1e-4
MODEL_TOLERANCE = 1e-3


def _var(rng, *shape, name: str, scale: float = 1.0) -> Tensor:
    return Tensor(rng.normal(scale=scale, size=shape), requires_grad=True, name=name)


# ---------------------------------------------------------------------------
# op cases


def _check_add(rng):
    x, y = _var(rng, 2, 3, 4, 5, name="x"), _var(rng, 1, 3, 1, 1, name="y")
    return finite_difference_check(ops.add, [x, y], name="add")


def _check_mul(rng):
    x, y = _var(rng, 2, 3, 4, 5, name="x"), _var(rng, 2, 1, 4, 5, name="y")
    return finite_difference_check(ops.mul, [x, y], name="mul")


def _check_concat(rng):
    a, b = _var(rng, 2, 2, 3, 3, name="a"), _var(rng, 2, 3, 3, 3, name="b")
    return finite_difference_check(ops.concat_channels, [a, b], name="concat_channels")


def _check_relu(rng):
    x = Tensor(rng.normal(size=(2, 3, 4, 4)), requires_grad=True, name="x")
    x.data[np.abs(x.data) < 1e-3] += 0.01  # stay off the kink
    return finite_difference_check(ops.relu, [x], name="relu")


def _check_sigmoid(rng):
    return finite_difference_check(ops.sigmoid, [_var(rng, 2, 3, 4, 4, name="x", scale=3.0)], name="sigmoid")


def _check_softmax(rng):
    return finite_difference_check(ops.softmax_channels, [_var(rng, 2, 4, 3, 3, name="x")], name="softmax_channels")


def _check_sum(rng):
    return finite_difference_check(ops.sum, [_var(rng, 2, 3, 4, 4, name="x")], name="sum")


def _check_mean(rng):
    return finite_difference_check(ops.mean, [_var(rng, 2, 3, 4, 4, name="x")], name="mean")


def _check_linear_combination(rng):
    a, b, c = (_var(rng, name=n) for n in "abc")
    return finite_difference_check(
        lambda *ts: ops.linear_combination(list(ts), [1.0, 0.4, 2.5]), [a, b, c], name="linear_combination"
    )


def _check_conv2d(rng):
    """Dense (strided, dilated, biased), grouped, and depthwise paths in one output."""
    x = _var(rng, 2, 4, 7, 7, name="x")
    w_dense = _var(rng, 6, 4, 3, 3, name="w_dense", scale=0.3)
    bias = _var(rng, 6, name="bias")
    w_group = _var(rng, 4, 2, 3, 3, name="w_group", scale=0.3)
    w_depth = _var(rng, 4, 1, 3, 3, name="w_depth", scale=0.3)

    def fn(x, w_dense, bias, w_group, w_depth):
        dense = ops.conv2d(x, w_dense, bias, stride=1, padding=2, dilation=2)
        grouped = ops.conv2d(x, w_group, None, stride=1, padding=1, groups=2)
        depth = ops.conv2d(x, w_depth, None, stride=1, padding=1, groups=4)
        strided = ops.conv2d(x, w_dense, None, stride=2, padding=1)
        return ops.concat_channels(dense, grouped, depth, ops.bilinear_resize(strided, 7, 7))

    return finite_difference_check(fn, [x, w_dense, bias, w_group, w_depth], name="conv2d")


def _check_dsconv(rng):
    x = _var(rng, 2, 3, 8, 8, name="x")
    dw = _var(rng, 3, 1, 3, 3, name="dw", scale=0.5)
    pw = _var(rng, 3, 3, 1, 1, name="pw", scale=0.5)
    return finite_difference_check(
        lambda x, dw, pw: ops.depthwise_separable_conv(x, dw, pw, dilation=2), [x, dw, pw], name="depthwise_separable_conv"
    )


def _check_batch_norm(rng):
    """Batch statistics (train) and running statistics (infer) in one output."""
    x = _var(rng, 3, 4, 3, 3, name="x", scale=2.0)
    gamma = Tensor(rng.uniform(0.5, 1.5, 4), requires_grad=True, name="gamma")
    beta = _var(rng, 4, name="beta")
    mean, var = rng.normal(size=4), rng.uniform(0.5, 2.0, 4)

    def fn(x, gamma, beta):
        train = ops.batch_norm(x, gamma, beta, mean.copy(), var.copy(), training=True)
        infer = ops.batch_norm(x, gamma, beta, mean, var, training=False)
        return ops.concat_channels(train, infer)

    return finite_difference_check(fn, [x, gamma, beta], name="batch_norm")


def _check_gap(rng):
    return finite_difference_check(ops.global_avg_pool, [_var(rng, 2, 3, 5, 4, name="x")], name="global_avg_pool")


def _check_conv1d(rng):
    u, w = _var(rng, 2, 7, 1, 1, name="u"), _var(rng, 5, name="w")
    return finite_difference_check(ops.conv1d_channels, [u, w], name="conv1d_channels")


def _check_max_pool(rng):
    # distinct values so the argmax is stable under perturbation
    x = Tensor(rng.permutation(2 * 3 * 8 * 8).reshape(2, 3, 8, 8) * 0.01, requires_grad=True, name="x")
    return finite_difference_check(lambda x: ops.max_pool2d(x, 3, 2, 1), [x], name="max_pool2d")


def _check_resize(rng):
    x = _var(rng, 2, 3, 3, 5, name="x")
    return finite_difference_check(lambda x: ops.bilinear_resize(x, 7, 6), [x], name="bilinear_resize")


def _check_warp(rng):
    x = _var(rng, 2, 3, 6, 6, name="x")
    # fractional offsets keep samples away from the bilinear kinks
    flow = Tensor(rng.integers(-2, 3, size=(2, 2, 6, 6)) + rng.uniform(0.2, 0.8, size=(2, 2, 6, 6)), requires_grad=True, name="flow")
    return finite_difference_check(ops.grid_sample_warp, [x, flow], name="grid_sample_warp")


def _check_cross_entropy(rng):
    logits = _var(rng, 2, 4, 5, 5, name="logits")
    labels = rng.integers(0, 4, size=(2, 5, 5))
    labels[0, 0, :3] = ops.IGNORE_INDEX
    weights = (rng.random((2, 5, 5)) < 0.6).astype(np.float64)
    weights[1, 1, 1] = 1.0

    def fn(z):
        plain = ops.cross_entropy(z, labels)
        mined = ops.cross_entropy(z, labels, weights)
        return ops.linear_combination([plain, mined], [1.0, 0.7])

    return finite_difference_check(fn, [logits], name="cross_entropy")


OP_CASES: dict[str, Callable] = {
    "add": _check_add,
    "mul": _check_mul,
    "concat_channels": _check_concat,
    "relu": _check_relu,
    "sigmoid": _check_sigmoid,
    "softmax_channels": _check_softmax,
    "sum": _check_sum,
    "mean": _check_mean,
    "linear_combination": _check_linear_combination,
    "conv2d": _check_conv2d,
    "depthwise_separable_conv": _check_dsconv,
    "batch_norm": _check_batch_norm,
    "global_avg_pool": _check_gap,
    "conv1d_channels": _check_conv1d,
    "max_pool2d": _check_max_pool,
    "bilinear_resize": _check_resize,
    "grid_sample_warp": _check_warp,
    "cross_entropy": _check_cross_entropy,
}


# ---------------------------------------------------------------------------
# block cases


def _randomize(module, rng) -> None:
    """Float64, train mode, and non-trivial values for BN affines and identity-initialized convs."""
    module.astype(np.float64)
    module.train()
    for name, p in module.named_parameters():
        if name.endswith("gamma"):
            p.data[:] = rng.uniform(0.5, 1.5, p.shape)
        elif name.endswith("beta") or name.endswith("bias"):
            p.data[:] = rng.normal(scale=0.2, size=p.shape)
        elif name.endswith("flow.weight"):
            p.data[:] = rng.normal(scale=0.05, size=p.shape)


def _param_inputs(module, rng, limit: int | None = None) -> list[Parameter]:
    named = list(module.named_parameters())
    if limit is not None and len(named) > limit:
        named = [named[i] for i in sorted(rng.choice(len(named), size=limit, replace=False))]
    for n, p in named:
        p.name = n
    return [p for _, p in named]


def _block_check(name, module, rng, make_inputs, call, max_entries=24, limit=None, tolerance=OP_TOLERANCE):
    _randomize(module, rng)
    xs = make_inputs()
    params = _param_inputs(module, rng, limit)
    n = len(xs)
    return finite_difference_check(
        lambda *ts: call(*ts[:n]), xs + params, name=name, max_entries=max_entries, tolerance=tolerance
    )


def _check_feb(kind: str):
    def case(rng):
        m = FEB(FebVariant(kind, 4), rng)
        return _block_check(kind, m, rng, lambda: [_var(rng, 2, 4, 12, 12, name="x")], m)

    return case


def _check_sca(rng):
    m = SCA(ScaConfig(8), rng)
    return _block_check("SCA", m, rng, lambda: [_var(rng, 2, 8, 5, 5, name="x")], m)


def _check_faa(rng):
    m = FAA(FaaConfig(4), rng)
    return _block_check(
        "FAA", m, rng, lambda: [_var(rng, 2, 4, 6, 6, name="high"), _var(rng, 2, 4, 6, 6, name="low")], m
    )


def _check_sfa(rng):
    m = SFA(SfaConfig(3, 4, 6), rng)
    return _block_check(
        "SFA", m, rng, lambda: [_var(rng, 2, 4, 8, 8, name="high"), _var(rng, 2, 6, 4, 4, name="low")], m
    )


def _check_head(rng):
    m = SegHead(SegHeadConfig(6, 3, 8), rng)
    return _block_check("seg_head", m, rng, lambda: [_var(rng, 2, 6, 4, 4, name="x")], lambda x: m(x, (8, 8)))


def _check_model(rng):
    """Whole network through the weighted principal + auxiliary loss."""
    config = SfanetConfig(num_classes=3, width=0.125, input_hw=(64, 64), lambdas=(0.4, 0.3, 1.0, 1.0), head_channels=8)
    m = SfanetModel(config)
    labels = rng.integers(0, 3, size=(2, 64, 64))

    def call(x):
        main, aux = m(x)
        return total_loss(main, aux, labels, config.lambdas).total

    return _block_check(
        "full_model", m, rng, lambda: [_var(rng, 2, 3, 64, 64, name="image")], call,
        max_entries=2, limit=None, tolerance=MODEL_TOLERANCE,
    )


BLOCK_CASES: dict[str, Callable] = {
    "FEB2": _check_feb("FEB2"),
    "FEB3": _check_feb("FEB3"),
    "FEB4": _check_feb("FEB4"),
    "SCA": _check_sca,
    "FAA": _check_faa,
    "SFA": _check_sfa,
    "seg_head": _check_head,
    "full_model": _check_model,
}


@dataclass
class SuiteRow:
    kind: str
    report: GradCheckReport
    seconds: float


def run_suite(seed: int = 0, names: list[str] | None = None) -> list[SuiteRow]:
    rows = []
    for kind, cases in (("op", OP_CASES), ("block", BLOCK_CASES)):
        for name, case in cases.items():
            if names is not None and name not in names:
                continue
            t0 = time.perf_counter()
            report = case(np.random.default_rng([seed, len(rows)]))
            rows.append(SuiteRow(kind, report, time.perf_counter() - t0))
    return rows


def format_table(rows: list[SuiteRow]) -> list[str]:
    lines = [f"{'kind':<6} {'name':<26} {'max_rel_err':>12} {'tol':>8} {'checked':>8} {'refined':>8} {'sec':>7}  status"]
    for row in rows:
        r = row.report
        lines.append(
            f"{row.kind:<6} {r.name:<26} {r.max_rel_error:>12.3e} {r.tolerance:>8.0e} {r.n_checked:>8d} {r.refined:>8d} "
            f"{row.seconds:>7.2f}  {'PASS' if r.passed else 'FAIL ' + r.worst}"
        )
    return lines
