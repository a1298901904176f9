"""Decoder and attention building blocks: CBR, FEB-2/3/4, SCA, FAA, SFA, segmentation head."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import ops
from .autograd import Parameter, Tensor
from .nn import BatchNorm2d, ChannelAffine, Conv2d, ConvBN, DepthwiseSeparableConv, Module
from .ops import ConvSpec

FEB_DILATIONS = {"FEB3": (1, 1), "FEB4": (2, 5)}
STAGE_FEB = {1: None, 2: "FEB2", 3: "FEB3", 4: "FEB4"}


def eca_kernel_size(channels: int, gamma: int = 2, b: int = 1) -> int:
    """Odd 1-D kernel size that grows with log2 of the channel count."""
    if channels < 1:
        raise ValueError(f"channel count must be >= 1, got {channels}")
    t = int(abs(math.log2(channels) + b) / gamma)
    return t if t % 2 else t + 1


@dataclass(frozen=True)
class FebVariant:
    kind: str
    channels: int

    def __post_init__(self):
        if self.kind not in ("FEB2", "FEB3", "FEB4"):
            raise ValueError(f"unknown FEB kind {self.kind!r}")

    @property
    def dilations(self) -> tuple[int, int] | None:
        return FEB_DILATIONS.get(self.kind)


@dataclass(frozen=True)
class ScaConfig:
    channels: int

    @property
    def kernel_size(self) -> int:
        return eca_kernel_size(self.channels)


@dataclass(frozen=True)
class FaaConfig:
    channels: int


@dataclass(frozen=True)
class SfaConfig:
    stage: int
    high_channels: int
    low_channels: int

    def __post_init__(self):
        if self.stage not in STAGE_FEB:
            raise ValueError(f"SFA stage must be one of 1..4, got {self.stage}")

    @property
    def feb(self) -> FebVariant | None:
        kind = STAGE_FEB[self.stage]
        return FebVariant(kind, self.high_channels) if kind else None


@dataclass(frozen=True)
class SegHeadConfig:
    in_channels: int
    num_classes: int
    mid_channels: int = 64


class CBR(Module):
    """3x3 conv -> BN -> ReLU."""

    def __init__(self, in_channels: int, out_channels: int, rng=None, stride: int = 1):
        super().__init__()
        self.unit = ConvBN(ConvSpec(in_channels, out_channels, 3, stride=stride, padding=1), rng)

    @property
    def out_channels(self) -> int:
        return self.unit.conv.spec.out_channels

    def forward(self, x: Tensor) -> Tensor:
        return ops.relu(self.unit(x))


class FEB(Module):
    """Stage-aware feature enhancement block; residual, shape-preserving.

    FEB2: two 3x3 conv+BN with no activation between them.
    FEB3/FEB4: two depthwise-separable convs (dilations (1, 1) or (2, 5)),
    the first output BN-normalized before the second, both concatenated and
    fused by 1x1 conv+BN.
    """

    def __init__(self, variant: FebVariant, rng=None):
        super().__init__()
        self.variant = variant
        c = variant.channels
        if variant.kind == "FEB2":
            self.conv_a = ConvBN(ConvSpec(c, c, 3, padding=1), rng)
            self.conv_b = ConvBN(ConvSpec(c, c, 3, padding=1), rng)
        else:
            d1, d2 = variant.dilations
            self.dwc_a = DepthwiseSeparableConv(c, d1, rng)
            self.bn_a = BatchNorm2d(c)
            self.dwc_b = DepthwiseSeparableConv(c, d2, rng)
            self.fuse = ConvBN(ConvSpec(2 * c, c, 1), rng)

    @property
    def kind(self) -> str:
        return self.variant.kind

    @property
    def dilations(self) -> tuple[int, int] | None:
        if self.kind == "FEB2":
            return None
        return self.dwc_a.dilation, self.dwc_b.dilation

    def branch(self, x: Tensor) -> Tensor:
        if self.kind == "FEB2":
            return self.conv_b(self.conv_a(x))
        first = self.dwc_a(x)
        second = self.dwc_b(self.bn_a(first))
        return self.fuse(ops.concat_channels(first, second))

    def forward(self, x: Tensor) -> Tensor:
        return ops.relu(ops.add(x, self.branch(x)))

    def fold(self) -> None:
        # bn_a cannot merge into dwc_a: the raw dwc_a output also feeds the concat
        if self.kind != "FEB2" and isinstance(self.bn_a, BatchNorm2d):
            scale, shift = self.bn_a.affine()
            dtype = self.bn_a.gamma.dtype
            self.bn_a = ChannelAffine(scale.astype(dtype), shift.astype(dtype))


class SCA(Module):
    """Spatial-channel attention: ``sigmoid(w_c) * x + sigmoid(v) * x``.

    ``w`` comes from a 1-D conv over the globally pooled channel vector,
    ``v`` from a 1x1 conv projecting to a single map.
    """

    def __init__(self, config: ScaConfig | int, rng=None):
        super().__init__()
        if isinstance(config, int):
            config = ScaConfig(config)
        self.config = config
        rng = rng if rng is not None else np.random.default_rng(0)
        k = config.kernel_size
        self.channel_weight = Parameter(rng.uniform(-1, 1, size=k) / math.sqrt(k))
        self.spatial = Conv2d(ConvSpec(config.channels, 1, 1, has_bias=True), rng)

    def gates(self, x: Tensor) -> tuple[Tensor, Tensor]:
        channel_gate = ops.sigmoid(ops.conv1d_channels(ops.global_avg_pool(x), self.channel_weight))
        spatial_gate = ops.sigmoid(self.spatial(x))
        return channel_gate, spatial_gate

    def forward(self, x: Tensor) -> Tensor:
        if x.shape[1] != self.config.channels:
            raise ValueError(f"SCA expects {self.config.channels} channels, got {x.shape[1]}")
        channel_gate, spatial_gate = self.gates(x)
        return ops.add(ops.mul(x, channel_gate), ops.mul(x, spatial_gate))

    def zero_gates(self) -> None:
        self.channel_weight.data[:] = 0
        self.spatial.weight.data[:] = 0
        self.spatial.bias.data[:] = 0


class FAA(Module):
    """Predict a 2-channel flow from both maps, warp the low map, add, attend."""

    def __init__(self, config: FaaConfig | int, rng=None):
        super().__init__()
        if isinstance(config, int):
            config = FaaConfig(config)
        self.config = config
        c = config.channels
        self.flow = Conv2d(ConvSpec(2 * c, 2, 3, padding=1, has_bias=True), rng)
        # start from the no-warp identity
        self.flow.weight.data[:] = 0
        self.sca = SCA(ScaConfig(c), rng)

    def predict_flow(self, high: Tensor, low: Tensor) -> Tensor:
        return self.flow(ops.concat_channels(high, low))

    def forward(self, high: Tensor, low: Tensor) -> Tensor:
        if high.shape != low.shape:
            raise ValueError(f"FAA inputs differ in shape: {high.shape} vs {low.shape}")
        warped = ops.grid_sample_warp(low, self.predict_flow(high, low))
        return self.sca(ops.add(high, warped))


class SFA(Module):
    """Stage-aware feature alignment between an encoder map and the coarser decoder map."""

    def __init__(self, config: SfaConfig, rng=None):
        super().__init__()
        self.config = config
        c = config.high_channels
        self.feb = FEB(config.feb, rng) if config.feb is not None else None
        self.sca = SCA(ScaConfig(c), rng)
        self.low_cbr = CBR(config.low_channels, c, rng)
        self.faa = FAA(FaaConfig(c), rng)

    @property
    def stage(self) -> int:
        return self.config.stage

    def forward(self, high: Tensor, low: Tensor) -> Tensor:
        h, w = high.shape[2:]
        if low.shape[2] > h or low.shape[3] > w:
            raise ValueError(f"SFA-{self.stage}: low map {low.shape} larger than high map {high.shape}")
        enhanced = self.sca(self.feb(high) if self.feb is not None else high)
        resized = ops.bilinear_resize(self.low_cbr(low), h, w)
        return self.faa(enhanced, resized)


class SegHead(Module):
    """CBR to ``mid_channels``, 3x3 conv to class logits, bilinear upsample."""

    def __init__(self, config: SegHeadConfig, rng=None):
        super().__init__()
        self.config = config
        self.cbr = CBR(config.in_channels, config.mid_channels, rng)
        self.classifier = Conv2d(ConvSpec(config.mid_channels, config.num_classes, 3, padding=1, has_bias=True), rng)

    def forward(self, x: Tensor, out_hw: tuple[int, int]) -> Tensor:
        if x.shape[1] != self.config.in_channels:
            raise ValueError(f"head expects {self.config.in_channels} channels, got {x.shape[1]}")
        if out_hw[0] < 1 or out_hw[1] < 1:
            raise ValueError(f"head target extents must be >= 1, got {out_hw}")
        return ops.bilinear_resize(self.classifier(self.cbr(x)), *out_hw)
