"""Differentiable operations on NCHW tensors.

Conventions shared by the resampling ops: bilinear sampling uses
half-pixel centres (align-corners off) and clamps out-of-range sample
coordinates to the border. Flow fields are offsets in output-pixel units,
channel 0 horizontal and channel 1 vertical.
"""

from __future__ import annotations

import functools
from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import as_strided

from .autograd import Tensor, as_tensor, make_result

IGNORE_INDEX = 255


def _pair(v) -> tuple[int, int]:
    if isinstance(v, (tuple, list)):
        return int(v[0]), int(v[1])
    return int(v), int(v)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _require_4d(x: Tensor, op: str) -> None:
    if x.ndim != 4:
        raise ValueError(f"{op} expects an N x C x H x W tensor, got shape {x.shape}")


# ---------------------------------------------------------------------------
# element-wise and structural ops


def add(x: Tensor, y: Tensor) -> Tensor:
    x, y = as_tensor(x), as_tensor(y)
    try:
        out_shape = np.broadcast_shapes(x.shape, y.shape)
    except ValueError:
        raise ValueError(f"add: shapes {x.shape} and {y.shape} do not match") from None
    data = x.data + y.data

    def backward(g):
        return _unbroadcast(g, x.shape), _unbroadcast(g, y.shape)

    assert data.shape == out_shape
    return make_result(data, "add", (x, y), backward)


def mul(x: Tensor, y) -> Tensor:
    """Element-wise product with numpy broadcasting (per-channel or per-pixel factors)."""
    x = as_tensor(x)
    y = as_tensor(y, dtype=x.dtype) if not isinstance(y, Tensor) else y
    try:
        np.broadcast_shapes(x.shape, y.shape)
    except ValueError:
        raise ValueError(f"mul: shapes {x.shape} and {y.shape} are not broadcastable") from None
    data = x.data * y.data

    def backward(g):
        gx = _unbroadcast(g * y.data, x.shape) if x.requires_grad else None
        gy = _unbroadcast(g * x.data, y.shape) if y.requires_grad else None
        return gx, gy

    return make_result(data, "mul", (x, y), backward)


def concat_channels(*xs: Tensor) -> Tensor:
    if len(xs) == 1 and isinstance(xs[0], (list, tuple)):
        xs = tuple(xs[0])
    for t in xs:
        _require_4d(t, "concat_channels")
        if t.shape[0] != xs[0].shape[0] or t.shape[2:] != xs[0].shape[2:]:
            raise ValueError(f"concat_channels: non-channel extents differ: {[t.shape for t in xs]}")
    data = np.concatenate([t.data for t in xs], axis=1)
    bounds = np.cumsum([0] + [t.shape[1] for t in xs])

    def backward(g):
        return tuple(g[:, bounds[i]:bounds[i + 1]] for i in range(len(xs)))

    return make_result(data, "concat_channels", xs, backward)


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    data = np.where(mask, x.data, 0).astype(x.dtype)

    def backward(g):
        return (g * mask,)

    return make_result(data, "relu", (x,), backward)


def sigmoid(x: Tensor) -> Tensor:
    # split by sign so exp never overflows
    z = np.exp(-np.abs(x.data))
    data = np.where(x.data >= 0, 1 / (1 + z), z / (1 + z)).astype(x.dtype)

    def backward(g):
        return (g * data * (1 - data),)

    return make_result(data, "sigmoid", (x,), backward)


def softmax_channels(x: Tensor) -> Tensor:
    shifted = x.data - x.data.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    data = e / e.sum(axis=1, keepdims=True)

    def backward(g):
        return (data * (g - (g * data).sum(axis=1, keepdims=True)),)

    return make_result(data, "softmax_channels", (x,), backward)


def sum(x: Tensor) -> Tensor:  # noqa: A001
    data = np.asarray(x.data.sum(), dtype=x.dtype)

    def backward(g):
        return (np.broadcast_to(g, x.shape).copy(),)

    return make_result(data, "sum", (x,), backward)


def mean(x: Tensor) -> Tensor:
    n = x.size
    data = np.asarray(x.data.mean(), dtype=x.dtype)

    def backward(g):
        return (np.full(x.shape, g / n, dtype=x.dtype),)

    return make_result(data, "mean", (x,), backward)


def linear_combination(terms: list[Tensor], coeffs: list[float]) -> Tensor:
    """Scalar ``sum(c_i * t_i)`` accumulated left to right in float64."""
    if len(terms) != len(coeffs):
        raise ValueError("linear_combination: terms and coefficients differ in length")
    total = 0.0
    for t, c in zip(terms, coeffs):
        if t.size != 1:
            raise ValueError(f"linear_combination: term of shape {t.shape} is not scalar")
        total = total + float(c) * float(t.data.reshape(-1)[0])
    data = np.asarray(total, dtype=np.float64)

    def backward(g):
        return tuple(np.full(t.shape, float(c) * g, dtype=t.dtype) for t, c in zip(terms, coeffs))

    return make_result(data, "linear_combination", terms, backward)


# ---------------------------------------------------------------------------
# convolution


@dataclass(frozen=True)
class ConvSpec:
    in_channels: int
    out_channels: int
    kernel: tuple[int, int] = (3, 3)
    stride: int = 1
    padding: int = 0
    dilation: int = 1
    groups: int = 1
    has_bias: bool = False

    def __post_init__(self):
        object.__setattr__(self, "kernel", _pair(self.kernel))
        if self.groups < 1 or self.in_channels % self.groups or self.out_channels % self.groups:
            raise ValueError(
                f"channels ({self.in_channels}, {self.out_channels}) not divisible by groups={self.groups}"
            )
        if self.stride < 1 or self.dilation < 1 or self.padding < 0:
            raise ValueError(f"invalid stride/dilation/padding in {self}")

    @property
    def weight_shape(self) -> tuple[int, int, int, int]:
        return (self.out_channels, self.in_channels // self.groups, *self.kernel)

    def output_extent(self, h: int, w: int) -> tuple[int, int]:
        return (
            conv_output_extent(h, self.kernel[0], self.stride, self.padding, self.dilation),
            conv_output_extent(w, self.kernel[1], self.stride, self.padding, self.dilation),
        )


def conv_output_extent(size: int, kernel: int, stride: int, padding: int, dilation: int) -> int:
    out = (size + 2 * padding - dilation * (kernel - 1) - 1) // stride + 1
    if out < 1:
        raise ValueError(
            f"conv output extent {out} < 1 for size={size}, kernel={kernel}, "
            f"stride={stride}, padding={padding}, dilation={dilation}"
        )
    return out


def _windows(xp: np.ndarray, kh: int, kw: int, ho: int, wo: int, stride: int, dilation: int) -> np.ndarray:
    """Read-only (N, C, kh, kw, Ho, Wo) view of the receptive fields of ``xp``."""
    n, c, _, _ = xp.shape
    sn, sc, sh, sw = xp.strides
    return as_strided(
        xp,
        shape=(n, c, kh, kw, ho, wo),
        strides=(sn, sc, sh * dilation, sw * dilation, sh * stride, sw * stride),
        writeable=False,
    )


def _tap_slice(i: int, j: int, ho: int, wo: int, stride: int, dilation: int):
    return (
        slice(None),
        slice(None),
        slice(i * dilation, i * dilation + stride * (ho - 1) + 1, stride),
        slice(j * dilation, j * dilation + stride * (wo - 1) + 1, stride),
    )


def _dense_conv_forward(xp, w, ho, wo, stride, dilation):
    n = xp.shape[0]
    cout, cin, kh, kw = w.shape
    cols = _windows(xp, kh, kw, ho, wo, stride, dilation).transpose(0, 4, 5, 1, 2, 3).reshape(n * ho * wo, -1)
    out = cols @ w.reshape(cout, -1).T
    return out.reshape(n, ho, wo, cout).transpose(0, 3, 1, 2), cols


def _dense_conv_backward(g, cols, w, xp_shape, ho, wo, stride, dilation):
    cout, cin, kh, kw = w.shape
    n = g.shape[0]
    gm = g.transpose(0, 2, 3, 1).reshape(-1, cout)
    gw = (gm.T @ cols).reshape(w.shape)
    dcols = (gm @ w.reshape(cout, -1)).reshape(n, ho, wo, cin, kh, kw)
    gxp = np.zeros(xp_shape, dtype=g.dtype)
    for i in range(kh):
        for j in range(kw):
            gxp[_tap_slice(i, j, ho, wo, stride, dilation)] += dcols[..., i, j].transpose(0, 3, 1, 2)
    return gxp, gw


def _depthwise_forward(xp, w, ho, wo, stride, dilation):
    _, _, kh, kw = w.shape
    out = None
    for i in range(kh):
        for j in range(kw):
            term = xp[_tap_slice(i, j, ho, wo, stride, dilation)] * w[:, 0, i, j][None, :, None, None]
            out = term if out is None else out + term
    return out


def _depthwise_backward(g, xp, w, ho, wo, stride, dilation):
    _, _, kh, kw = w.shape
    gw = np.zeros_like(w)
    gxp = np.zeros_like(xp)
    for i in range(kh):
        for j in range(kw):
            sl = _tap_slice(i, j, ho, wo, stride, dilation)
            gw[:, 0, i, j] = (g * xp[sl]).sum(axis=(0, 2, 3))
            gxp[sl] += g * w[:, 0, i, j][None, :, None, None]
    return gxp, gw


def conv2d(
    x: Tensor,
    weight: Tensor,
    bias: Tensor | None = None,
    stride: int = 1,
    padding: int = 0,
    dilation: int = 1,
    groups: int = 1,
) -> Tensor:
    """2-D cross-correlation with zero padding, dilation and channel groups.

    ``weight`` has shape (Cout, Cin // groups, kh, kw).
    """
    _require_4d(x, "conv2d")
    n, cin, h, w_ = x.shape
    cout, cin_g, kh, kw = weight.shape
    if cin % groups or cout % groups or cin_g != cin // groups:
        raise ValueError(f"conv2d: input {x.shape} incompatible with weight {weight.shape} and groups={groups}")
    if bias is not None and bias.shape != (cout,):
        raise ValueError(f"conv2d: bias shape {bias.shape} != ({cout},)")
    ho = conv_output_extent(h, kh, stride, padding, dilation)
    wo = conv_output_extent(w_, kw, stride, padding, dilation)
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.data
    wd = weight.data
    depthwise = groups == cin == cout

    if groups == 1:
        out, cols = _dense_conv_forward(xp, wd, ho, wo, stride, dilation)
        saved = [cols]
    elif depthwise:
        out = _depthwise_forward(xp, wd, ho, wo, stride, dilation)
        saved = []
    else:
        cg, og = cin // groups, cout // groups
        parts, saved = [], []
        for gi in range(groups):
            o, cols = _dense_conv_forward(xp[:, gi * cg:(gi + 1) * cg], wd[gi * og:(gi + 1) * og], ho, wo, stride, dilation)
            parts.append(o)
            saved.append(cols)
        out = np.concatenate(parts, axis=1)
    out = np.ascontiguousarray(out)
    if bias is not None:
        out += bias.data[None, :, None, None]

    def backward(g):
        if groups == 1:
            gxp, gw = _dense_conv_backward(g, saved[0], wd, xp.shape, ho, wo, stride, dilation)
        elif depthwise:
            gxp, gw = _depthwise_backward(g, xp, wd, ho, wo, stride, dilation)
        else:
            cg, og = cin // groups, cout // groups
            gxp = np.zeros(xp.shape, dtype=g.dtype)
            gw = np.zeros_like(wd)
            for gi in range(groups):
                gx_i, gw_i = _dense_conv_backward(
                    g[:, gi * og:(gi + 1) * og], saved[gi], wd[gi * og:(gi + 1) * og],
                    (n, cg) + xp.shape[2:], ho, wo, stride, dilation,
                )
                gxp[:, gi * cg:(gi + 1) * cg] = gx_i
                gw[gi * og:(gi + 1) * og] = gw_i
        gx = gxp[:, :, padding:padding + h, padding:padding + w_] if padding else gxp
        gb = g.sum(axis=(0, 2, 3)) if bias is not None else None
        return (np.ascontiguousarray(gx), gw, gb) if bias is not None else (np.ascontiguousarray(gx), gw)

    inputs = (x, weight, bias) if bias is not None else (x, weight)
    return make_result(out, "conv2d", inputs, backward, stride=stride, padding=padding, dilation=dilation, groups=groups)


def depthwise_separable_conv(
    x: Tensor, dw_weight: Tensor, pw_weight: Tensor, dilation: int = 1, pw_bias: Tensor | None = None
) -> Tensor:
    """3x3 (or kxk) per-channel conv at the given dilation, then a 1x1 channel mix.

    Padding equals ``dilation * (k - 1) // 2`` so spatial extents are preserved.
    """
    if dilation < 1:
        raise ValueError(f"dilation must be >= 1, got {dilation}")
    c = x.shape[1]
    if dw_weight.shape[:2] != (c, 1):
        raise ValueError(f"depthwise weight {dw_weight.shape} does not match {c} channels")
    if pw_weight.shape[2:] != (1, 1):
        raise ValueError(f"pointwise weight must be 1x1, got {pw_weight.shape}")
    pad = dilation * (dw_weight.shape[2] - 1) // 2
    y = conv2d(x, dw_weight, None, stride=1, padding=pad, dilation=dilation, groups=c)
    return conv2d(y, pw_weight, pw_bias)


# ---------------------------------------------------------------------------
# normalization and pooling


def batch_norm(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    training: bool,
    momentum: float = 0.1,
    eps: float = 1e-5,
) -> Tensor:
    """Per-channel batch normalization.

    In training mode ``running_mean``/``running_var`` are updated in place
    (the variance estimate is unbiased, as usual for running statistics).
    """
    _require_4d(x, "batch_norm")
    c = x.shape[1]
    if gamma.shape != (c,) or beta.shape != (c,) or running_mean.shape != (c,):
        raise ValueError(f"batch_norm: {c} channels vs state of size {gamma.shape}")
    shape = (1, c, 1, 1)
    if training:
        count = x.size // c
        if count == 0:
            raise ValueError("batch_norm: no elements to compute batch statistics")
        mu = x.data.mean(axis=(0, 2, 3))
        var = x.data.var(axis=(0, 2, 3))
        running_mean *= 1 - momentum
        running_mean += momentum * mu
        running_var *= 1 - momentum
        running_var += momentum * (var * count / (count - 1) if count > 1 else var)
    else:
        count = None
        mu, var = running_mean, running_var
    inv_std = (1.0 / np.sqrt(var + eps)).astype(x.dtype)
    xhat = (x.data - mu.reshape(shape)) * inv_std.reshape(shape)
    data = xhat * gamma.data.reshape(shape) + beta.data.reshape(shape)

    def backward(g):
        gg = (g * xhat).sum(axis=(0, 2, 3))
        gb = g.sum(axis=(0, 2, 3))
        dxhat = g * gamma.data.reshape(shape)
        if training:
            gx = (inv_std.reshape(shape) / count) * (
                count * dxhat
                - dxhat.sum(axis=(0, 2, 3), keepdims=True)
                - xhat * (dxhat * xhat).sum(axis=(0, 2, 3), keepdims=True)
            )
        else:
            gx = dxhat * inv_std.reshape(shape)
        return gx, gg, gb

    return make_result(data.astype(x.dtype), "batch_norm", (x, gamma, beta), backward)


def global_avg_pool(x: Tensor) -> Tensor:
    _require_4d(x, "global_avg_pool")
    hw = x.shape[2] * x.shape[3]
    data = x.data.mean(axis=(2, 3), keepdims=True)

    def backward(g):
        return (np.broadcast_to(g / hw, x.shape).astype(x.dtype),)

    return make_result(data, "global_avg_pool", (x,), backward)


def conv1d_channels(u: Tensor, weight: Tensor) -> Tensor:
    """Zero-padded 1-D convolution along the channel axis of an (N, C, 1, 1) map."""
    _require_4d(u, "conv1d_channels")
    k = weight.shape[0]
    if weight.ndim != 1 or k % 2 == 0:
        raise ValueError(f"conv1d_channels needs an odd 1-D kernel, got shape {weight.shape}")
    n, c = u.shape[:2]
    pad = (k - 1) // 2
    up = np.zeros((n, c + 2 * pad), dtype=u.dtype)
    up[:, pad:pad + c] = u.data.reshape(n, c)
    wd = weight.data
    out = np.zeros((n, c), dtype=u.dtype)
    for j in range(k):
        out += wd[j] * up[:, j:j + c]

    def backward(g):
        g2 = g.reshape(n, c)
        gw = np.array([(g2 * up[:, j:j + c]).sum() for j in range(k)], dtype=wd.dtype)
        gup = np.zeros_like(up)
        for j in range(k):
            gup[:, j:j + c] += g2 * wd[j]
        return gup[:, pad:pad + c].reshape(u.shape), gw

    return make_result(out.reshape(u.shape), "conv1d_channels", (u, weight), backward)


def max_pool2d(x: Tensor, kernel: int = 3, stride: int = 2, padding: int = 1) -> Tensor:
    """Window maximum; on ties the first window element in row-major order wins."""
    _require_4d(x, "max_pool2d")
    if padding > kernel // 2:
        raise ValueError("max_pool2d: padding must be at most half the kernel")
    n, c, h, w = x.shape
    ho = conv_output_extent(h, kernel, stride, padding, 1)
    wo = conv_output_extent(w, kernel, stride, padding, 1)
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)), constant_values=-np.inf)
    taps = np.stack(
        [xp[_tap_slice(i, j, ho, wo, stride, 1)] for i in range(kernel) for j in range(kernel)]
    )
    arg = taps.argmax(axis=0)
    data = np.take_along_axis(taps, arg[None], axis=0)[0]

    def backward(g):
        gxp = np.zeros(xp.shape, dtype=g.dtype)
        for t in range(kernel * kernel):
            i, j = divmod(t, kernel)
            gxp[_tap_slice(i, j, ho, wo, stride, 1)] += np.where(arg == t, g, 0)
        return (gxp[:, :, padding:padding + h, padding:padding + w],)

    return make_result(data, "max_pool2d", (x,), backward)


# ---------------------------------------------------------------------------
# resampling


def interp_matrix(in_size: int, out_size: int, dtype=np.float64) -> np.ndarray:
    """(out, in) linear-interpolation weights, half-pixel centres, border clamp.

    Cached; the returned array is read-only.
    """
    return _interp_matrix(int(in_size), int(out_size), np.dtype(dtype).str)


@functools.lru_cache(maxsize=256)
def _interp_matrix(in_size: int, out_size: int, dtype: str) -> np.ndarray:
    m = np.zeros((out_size, in_size), dtype=np.float64)
    scale = in_size / out_size
    for i in range(out_size):
        src = min(max((i + 0.5) * scale - 0.5, 0.0), in_size - 1)
        i0 = int(np.floor(src))
        i1 = min(i0 + 1, in_size - 1)
        frac = src - i0
        m[i, i0] += 1 - frac
        m[i, i1] += frac
    m = m.astype(dtype)
    m.flags.writeable = False
    return m


def bilinear_resize(x: Tensor, out_h: int, out_w: int) -> Tensor:
    _require_4d(x, "bilinear_resize")
    if out_h < 1 or out_w < 1:
        raise ValueError(f"bilinear_resize: target extents must be >= 1, got ({out_h}, {out_w})")
    _, _, h, w = x.shape
    if (h, w) == (out_h, out_w):
        return make_result(x.data.copy(), "bilinear_resize", (x,), lambda g: (g,))
    mh = interp_matrix(h, out_h, x.dtype)
    mw = interp_matrix(w, out_w, x.dtype)
    data = mh @ (x.data @ mw.T)

    def backward(g):
        return ((mh.T @ g) @ mw,)

    return make_result(np.ascontiguousarray(data), "bilinear_resize", (x,), backward)


def grid_sample_warp(x: Tensor, flow: Tensor) -> Tensor:
    """Sample ``x`` at ``p + flow(p)`` for every output pixel ``p``."""
    _require_4d(x, "grid_sample_warp")
    n, c, h, w = x.shape
    if flow.ndim != 4 or flow.shape[1] != 2:
        raise ValueError(f"grid_sample_warp: flow must have 2 channels, got shape {flow.shape}")
    if flow.shape[0] != n or flow.shape[2:] != (h, w):
        raise ValueError(f"grid_sample_warp: flow {flow.shape} does not match input {x.shape}")
    dtype = x.dtype
    ys, xs = np.meshgrid(np.arange(h, dtype=dtype), np.arange(w, dtype=dtype), indexing="ij")
    sx = xs[None] + flow.data[:, 0]
    sy = ys[None] + flow.data[:, 1]
    inside_x = (sx >= 0) & (sx <= w - 1)
    inside_y = (sy >= 0) & (sy <= h - 1)
    cx = np.clip(sx, 0, w - 1)
    cy = np.clip(sy, 0, h - 1)
    x0 = np.floor(cx).astype(np.int64)
    y0 = np.floor(cy).astype(np.int64)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    fx = (cx - x0).astype(dtype)
    fy = (cy - y0).astype(dtype)

    flat = x.data.reshape(n, c, h * w)

    def gather(iy, ix):
        idx = (iy * w + ix).reshape(n, 1, h * w)
        return np.take_along_axis(flat, np.broadcast_to(idx, (n, c, h * w)), axis=2).reshape(n, c, h, w)

    v00, v01 = gather(y0, x0), gather(y0, x1)
    v10, v11 = gather(y1, x0), gather(y1, x1)
    wx1, wy1 = fx[:, None], fy[:, None]
    wx0, wy0 = 1 - wx1, 1 - wy1
    if not flow.data.any():
        data = x.data.copy()
    else:
        data = v00 * (wx0 * wy0) + v01 * (wx1 * wy0) + v10 * (wx0 * wy1) + v11 * (wx1 * wy1)

    def backward(g):
        gx = None
        if x.requires_grad:
            base = (np.arange(n * c) * (h * w)).reshape(n, c, 1)
            acc = np.zeros(n * c * h * w, dtype=np.float64)
            for iy, ix, wt in ((y0, x0, wx0 * wy0), (y0, x1, wx1 * wy0), (y1, x0, wx0 * wy1), (y1, x1, wx1 * wy1)):
                idx = base + (iy * w + ix).reshape(n, 1, h * w)
                acc += np.bincount(idx.ravel(), weights=(g * wt).reshape(n, c, -1).ravel(), minlength=acc.size)
            gx = acc.reshape(x.shape).astype(dtype)
        gflow = None
        if flow.requires_grad:
            dsx = ((v01 - v00) * wy0 + (v11 - v10) * wy1) * g
            dsy = ((v10 - v00) * wx0 + (v11 - v01) * wx1) * g
            gflow = np.stack(
                [dsx.sum(axis=1) * inside_x, dsy.sum(axis=1) * inside_y], axis=1
            ).astype(flow.dtype)
        return gx, gflow

    return make_result(np.ascontiguousarray(data), "grid_sample_warp", (x, flow), backward)


# ---------------------------------------------------------------------------
# losses


def pixel_nll(logits: np.ndarray, labels: np.ndarray, ignore_index: int = IGNORE_INDEX):
    """Per-pixel negative log-likelihood (numpy, no tape) and the valid mask."""
    k = logits.shape[1]
    valid = labels != ignore_index
    bad = valid & ((labels < 0) | (labels >= k))
    if bad.any():
        raise ValueError(f"labels outside [0, {k}) found: {np.unique(labels[bad])}")
    safe = np.where(valid, labels, 0).astype(np.int64)
    shifted = logits - logits.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(shifted).sum(axis=1))
    picked = np.take_along_axis(shifted, safe[:, None], axis=1)[:, 0]
    return logsum - picked, valid, safe


def cross_entropy(
    logits: Tensor,
    labels: np.ndarray,
    weights: np.ndarray | None = None,
    ignore_index: int = IGNORE_INDEX,
) -> Tensor:
    """Pixel-wise softmax cross-entropy, averaged over the selected pixels.

    ``weights`` (same shape as ``labels``) selects or weighs pixels; by
    default every non-ignored pixel has weight one. The scalar result is
    float64.
    """
    _require_4d(logits, "cross_entropy")
    labels = np.asarray(labels)
    if labels.shape != (logits.shape[0],) + logits.shape[2:]:
        raise ValueError(f"cross_entropy: labels {labels.shape} do not match logits {logits.shape}")
    nll, valid, safe = pixel_nll(logits.data, labels, ignore_index)
    wts = valid.astype(np.float64) if weights is None else np.where(valid, weights, 0).astype(np.float64)
    total_w = wts.sum()
    if total_w <= 0:
        raise ValueError("cross_entropy: no valid pixels")
    data = np.asarray((wts * nll.astype(np.float64)).sum() / total_w, dtype=np.float64)

    def backward(g):
        shifted = logits.data - logits.data.max(axis=1, keepdims=True)
        p = np.exp(shifted)
        p /= p.sum(axis=1, keepdims=True)
        np.put_along_axis(p, safe[:, None], np.take_along_axis(p, safe[:, None], axis=1) - 1, axis=1)
        scale = (wts * (np.asarray(g).item() / total_w)).astype(logits.dtype)
        return (p * scale[:, None],)

    return make_result(data, "cross_entropy", (logits,), backward)
