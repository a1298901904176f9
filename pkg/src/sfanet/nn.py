"""Minimal parameter-owning module system on top of :mod:`sfanet.ops`."""

from __future__ import annotations

import dataclasses
from typing import Iterator

import numpy as np

from . import ops
from .autograd import Buffer, Parameter, Tensor
from .ops import ConvSpec


class Module:
    def __init__(self):
        self.training = True

    def forward(self, *args, **kwargs):
        raise NotImplementedError

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def named_children(self) -> Iterator[tuple[str, "Module"]]:
        for key, value in vars(self).items():
            if isinstance(value, Module):
                yield key, value
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield f"{key}.{i}", item

    def named_modules(self, prefix: str = "") -> Iterator[tuple[str, "Module"]]:
        yield prefix, self
        for name, child in self.named_children():
            yield from child.named_modules(f"{prefix}.{name}" if prefix else name)

    def modules(self) -> Iterator["Module"]:
        for _, m in self.named_modules():
            yield m

    def _named_tensors(self, kind) -> Iterator[tuple[str, Tensor]]:
        for prefix, module in self.named_modules():
            for key, value in vars(module).items():
                if isinstance(value, kind):
                    yield (f"{prefix}.{key}" if prefix else key), value

    def named_parameters(self) -> Iterator[tuple[str, Parameter]]:
        return self._named_tensors(Parameter)

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def named_buffers(self) -> Iterator[tuple[str, Buffer]]:
        return self._named_tensors(Buffer)

    def state_dict(self) -> dict[str, np.ndarray]:
        state = {name: p.data for name, p in self.named_parameters()}
        state.update({name: b.data for name, b in self.named_buffers()})
        return state

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        own = dict(self.named_parameters())
        own.update(dict(self.named_buffers()))
        missing = sorted(set(own) - set(state))
        unexpected = sorted(set(state) - set(own))
        if missing or unexpected:
            raise KeyError(f"state mismatch: missing={missing[:5]} unexpected={unexpected[:5]}")
        # validate everything before touching any tensor: no partial loads
        for name, t in own.items():
            arr = np.asarray(state[name])
            if arr.shape != t.shape:
                raise ValueError(f"{name}: shape {arr.shape} != {t.shape}")
            if arr.dtype.kind != "f":
                raise TypeError(f"{name}: expected floating-point data, got {arr.dtype}")
        for name, t in own.items():
            t.data = np.array(state[name], copy=True, order="C")
            t.grad = None

    @property
    def dtype(self):
        for _, p in self.named_parameters():
            return p.dtype
        return np.dtype(np.float32)

    def num_parameters(self) -> int:
        return int(np.sum([p.size for p in self.parameters()], dtype=np.int64))

    def train(self, mode: bool = True) -> "Module":
        for m in self.modules():
            m.training = mode
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def astype(self, dtype) -> "Module":
        for _, t in list(self.named_parameters()) + list(self.named_buffers()):
            t.data = t.data.astype(dtype)
            t.grad = None
        return self

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None


def kaiming_normal(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    return rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape)


class Conv2d(Module):
    def __init__(self, spec: ConvSpec, rng: np.random.Generator | None = None):
        super().__init__()
        self.spec = spec
        rng = rng if rng is not None else np.random.default_rng(0)
        fan_in = (spec.in_channels // spec.groups) * spec.kernel[0] * spec.kernel[1]
        self.weight = Parameter(kaiming_normal(rng, spec.weight_shape, fan_in))
        self.bias = Parameter(np.zeros(spec.out_channels)) if spec.has_bias else None

    def forward(self, x: Tensor) -> Tensor:
        s = self.spec
        return ops.conv2d(x, self.weight, self.bias, s.stride, s.padding, s.dilation, s.groups)


class BatchNorm2d(Module):
    def __init__(self, channels: int, momentum: float = 0.1, eps: float = 1e-5):
        super().__init__()
        if eps <= 0:
            raise ValueError("eps must be positive")
        self.channels = channels
        self.momentum = momentum
        self.eps = eps
        self.gamma = Parameter(np.ones(channels))
        self.beta = Parameter(np.zeros(channels))
        self.running_mean = Buffer(np.zeros(channels))
        self.running_var = Buffer(np.ones(channels))

    def forward(self, x: Tensor) -> Tensor:
        return ops.batch_norm(
            x, self.gamma, self.beta, self.running_mean.data, self.running_var.data,
            self.training, self.momentum, self.eps,
        )

    def affine(self) -> tuple[np.ndarray, np.ndarray]:
        """Inference-mode ``(scale, shift)`` with ``bn(x) == scale * x + shift``."""
        scale = self.gamma.data.astype(np.float64) / np.sqrt(self.running_var.data.astype(np.float64) + self.eps)
        return scale, self.beta.data - self.running_mean.data.astype(np.float64) * scale


class ChannelAffine(Module):
    """Frozen per-channel ``scale * x + shift``; what an unmergeable BN folds into."""

    def __init__(self, scale: np.ndarray, shift: np.ndarray):
        super().__init__()
        c = scale.shape[0]
        self.scale = Buffer(scale.reshape(1, c, 1, 1), dtype=scale.dtype)
        self.shift = Buffer(shift.reshape(1, c, 1, 1), dtype=shift.dtype)

    def forward(self, x: Tensor) -> Tensor:
        return ops.add(ops.mul(x, self.scale), self.shift)


class ConvBN(Module):
    """Convolution followed by batch norm, foldable into a single biased conv."""

    def __init__(self, spec: ConvSpec, rng=None):
        super().__init__()
        self.conv = Conv2d(spec, rng)
        self.bn = BatchNorm2d(spec.out_channels)

    def forward(self, x: Tensor) -> Tensor:
        y = self.conv(x)
        return self.bn(y) if self.bn is not None else y

    def fold(self) -> None:
        if self.bn is None:
            return
        scale, shift = self.bn.affine()
        w = self.conv.weight.data
        self.conv.weight = Parameter(w * scale.reshape(-1, 1, 1, 1), dtype=w.dtype)
        bias = self.conv.bias.data.astype(np.float64) if self.conv.bias is not None else np.zeros_like(shift)
        self.conv.bias = Parameter(bias * scale + shift, dtype=w.dtype)
        self.conv.spec = dataclasses.replace(self.conv.spec, has_bias=True)
        self.bn = None


class DepthwiseSeparableConv(Module):
    def __init__(self, channels: int, dilation: int, rng=None, out_channels: int | None = None):
        super().__init__()
        out_channels = out_channels or channels
        self.dilation = dilation
        self.depthwise = Conv2d(
            ConvSpec(channels, channels, 3, padding=dilation, dilation=dilation, groups=channels), rng
        )
        self.pointwise = Conv2d(ConvSpec(channels, out_channels, 1), rng)

    def forward(self, x: Tensor) -> Tensor:
        return ops.depthwise_separable_conv(
            x, self.depthwise.weight, self.pointwise.weight, self.dilation, self.pointwise.bias
        )


def fold_module_tree(root: Module) -> None:
    for m in root.modules():
        if isinstance(m, ConvBN):
            m.fold()
