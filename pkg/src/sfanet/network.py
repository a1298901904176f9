"""SFANet: residual encoder with SCA, GAP context, four SFA decoder stages, heads."""

from __future__ import annotations

import copy
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import ops
from .autograd import Tensor, no_grad
from .blocks import CBR, FEB, SCA, SFA, ScaConfig, SegHead, SegHeadConfig, SfaConfig
from .nn import ConvBN, Module, fold_module_tree
from .ops import ConvSpec

BASE_CHANNELS = (64, 128, 256, 512)
DEFAULT_LAMBDAS = (0.0, 0.0, 1.0, 1.0)


@dataclass
class SfanetConfig:
    num_classes: int = 4
    width: float = 1.0
    input_hw: tuple[int, int] = (64, 64)
    lambdas: tuple[float, float, float, float] = DEFAULT_LAMBDAS
    head_channels: int = 64
    seed: int = 0

    def __post_init__(self):
        self.input_hw = tuple(int(v) for v in self.input_hw)
        self.lambdas = tuple(float(v) for v in self.lambdas)
        if len(self.lambdas) != 4:
            raise ValueError(f"need four auxiliary weights, got {self.lambdas}")
        if self.num_classes < 1:
            raise ValueError("num_classes must be >= 1")
        for c in self.stage_channels[1:]:
            if c < 2 or c % 2:
                raise ValueError(f"width {self.width} gives channel count {c}, which cannot be halved")
        if self.stage_channels[0] < 1:
            raise ValueError(f"width {self.width} too small")

    @property
    def stage_channels(self) -> tuple[int, int, int, int]:
        return tuple(int(round(c * self.width)) for c in BASE_CHANNELS)


class BasicBlock(Module):
    def __init__(self, in_channels: int, out_channels: int, stride: int, rng):
        super().__init__()
        self.conv1 = ConvBN(ConvSpec(in_channels, out_channels, 3, stride=stride, padding=1), rng)
        self.conv2 = ConvBN(ConvSpec(out_channels, out_channels, 3, padding=1), rng)
        self.downsample = None
        if stride != 1 or in_channels != out_channels:
            self.downsample = ConvBN(ConvSpec(in_channels, out_channels, 1, stride=stride), rng)

    def forward(self, x: Tensor) -> Tensor:
        y = self.conv2(ops.relu(self.conv1(x)))
        shortcut = self.downsample(x) if self.downsample is not None else x
        return ops.relu(ops.add(y, shortcut))


class EncoderStage(Module):
    """Two basic residual blocks, optionally with SCA between them."""

    def __init__(self, in_channels: int, out_channels: int, stride: int, with_sca: bool, rng):
        super().__init__()
        self.block1 = BasicBlock(in_channels, out_channels, stride, rng)
        self.sca = SCA(ScaConfig(out_channels), rng) if with_sca else None
        self.block2 = BasicBlock(out_channels, out_channels, 1, rng)

    def forward(self, x: Tensor) -> Tensor:
        x = self.block1(x)
        if self.sca is not None:
            x = self.sca(x)
        return self.block2(x)


@dataclass
class LossBundle:
    principal: Tensor
    auxiliary: list[Tensor | None]
    lambdas: tuple[float, ...]
    total: Tensor

    def values(self) -> dict[str, float]:
        out = {"loss": self.total.item(), "l_p": self.principal.item()}
        for i, aux in enumerate(self.auxiliary, start=1):
            out[f"l_aux{i}"] = aux.item() if aux is not None else float("nan")
        return out


class SfanetModel(Module):
    def __init__(self, config: SfanetConfig | None = None):
        super().__init__()
        self.config = config = config or SfanetConfig()
        rng = np.random.default_rng(config.seed)
        c1, c2, c3, c4 = config.stage_channels
        n = config.num_classes

        self.stem = ConvBN(ConvSpec(3, c1, 3, stride=2, padding=1), rng)
        self.res1 = EncoderStage(c1, c1, 1, False, rng)
        self.res2 = EncoderStage(c1, c2, 2, True, rng)
        self.res3 = EncoderStage(c2, c3, 2, True, rng)
        self.res4 = EncoderStage(c3, c4, 2, True, rng)

        self.reduce2 = CBR(c2, c2 // 2, rng)
        self.reduce3 = CBR(c3, c3 // 2, rng)
        self.reduce4 = CBR(c4, c4 // 2, rng)

        self.sfa4 = SFA(SfaConfig(4, c4 // 2, c4), rng)
        self.sfa3 = SFA(SfaConfig(3, c3 // 2, c4 // 2), rng)
        self.sfa2 = SFA(SfaConfig(2, c2 // 2, c3 // 2), rng)
        self.sfa1 = SFA(SfaConfig(1, c1, c2 // 2), rng)

        self.head = SegHead(SegHeadConfig(2 * c1, n, config.head_channels), rng)
        sfa_out = (c1, c2 // 2, c3 // 2, c4 // 2)
        self.aux_heads = [SegHead(SegHeadConfig(c, n, config.head_channels), rng) for c in sfa_out]
        self.folded = False

    @property
    def sfas(self) -> list[SFA]:
        return [self.sfa1, self.sfa2, self.sfa3, self.sfa4]

    @property
    def encoder_stages(self) -> list[EncoderStage]:
        return [self.res1, self.res2, self.res3, self.res4]

    def encode(self, image: Tensor) -> list[Tensor]:
        h, w = image.shape[2:]
        if h % 32 or w % 32:
            raise ValueError(
                f"input extents {h}x{w} must be divisible by 32; pad to {-(-h // 32) * 32}x{-(-w // 32) * 32}"
            )
        x = ops.max_pool2d(ops.relu(self.stem(image)), 3, 2, 1)
        maps = []
        for stage in self.encoder_stages:
            x = stage(x)
            maps.append(x)
        return maps

    def decode(self, maps: list[Tensor], out_hw: tuple[int, int], aux: bool | tuple[bool, ...] = False):
        """Run the SFA chain and heads.

        ``aux`` selects auxiliary heads: ``True`` for all, or one flag per
        SFA-1..4. Heads passed ``"value"`` (see :meth:`forward`) run without
        recording gradients.
        """
        r1, r2, r3, r4 = maps
        context = ops.global_avg_pool(r4)
        y4 = self.sfa4(self.reduce4(r4), context)
        y3 = self.sfa3(self.reduce3(r3), y4)
        y2 = self.sfa2(self.reduce2(r2), y3)
        y1 = self.sfa1(r1, y2)
        main = self.head(ops.concat_channels(y1, r1), out_hw)
        if not aux:
            return main
        if self.folded or not self.aux_heads:
            raise RuntimeError("auxiliary heads are not available on a folded inference model")
        flags = (aux,) * 4 if isinstance(aux, (bool, str)) else tuple(aux)
        outs = []
        for flag, head, y in zip(flags, self.aux_heads, (y1, y2, y3, y4)):
            if not flag:
                outs.append(None)
            elif flag == "value":
                with no_grad():
                    outs.append(head(y, out_hw))
            else:
                outs.append(head(y, out_hw))
        return main, outs

    def forward(self, image: Tensor, aux=None):
        """Main logits in infer mode; ``(main, [aux1..aux4])`` in train mode.

        ``aux`` overrides the per-head selection in train mode: one entry per
        SFA, each ``True`` (differentiable), ``"value"`` (no tape) or ``False``.
        """
        maps = self.encode(image)
        out_hw = image.shape[2:]
        if not self.training:
            if aux:
                raise RuntimeError("auxiliary outputs requested in infer mode")
            return self.decode(maps, out_hw)
        return self.decode(maps, out_hw, True if aux is None else aux)

    def train(self, mode: bool = True) -> "SfanetModel":
        if mode and self.folded:
            raise RuntimeError("a BN-folded model is inference-only")
        return super().train(mode)


def total_loss(
    main: Tensor,
    aux: list[Tensor | None],
    labels: np.ndarray,
    lambdas=DEFAULT_LAMBDAS,
    principal_loss: Callable[[Tensor, np.ndarray], Tensor] | None = None,
) -> LossBundle:
    """Principal loss plus lambda-weighted auxiliary cross-entropies.

    Heads with zero weight may be ``None`` or value-only; they are reported
    but contribute nothing to the gradient.
    """
    principal = (principal_loss or ops.cross_entropy)(main, labels)
    aux_losses = [ops.cross_entropy(z, labels) if z is not None else None for z in aux]
    terms, coeffs = [principal], [1.0]
    for lam, loss in zip(lambdas, aux_losses):
        if lam != 0.0:
            if loss is None:
                raise ValueError("non-zero auxiliary weight for a head that was not evaluated")
            terms.append(loss)
            coeffs.append(lam)
    total = ops.linear_combination(terms, coeffs)
    return LossBundle(principal, aux_losses, tuple(lambdas), total)


def recompute_total(values: dict[str, float], lambdas) -> float:
    """Rebuild the weighted total from logged components, in the same order as :func:`total_loss`."""
    total = 0.0 + 1.0 * values["l_p"]
    for i, lam in enumerate(lambdas, start=1):
        if lam != 0.0:
            total = total + float(lam) * values[f"l_aux{i}"]
    return total


def fold_batch_norm(model: SfanetModel) -> SfanetModel:
    """Inference copy with every conv+BN pair merged and auxiliary heads dropped."""
    if model.training:
        raise RuntimeError("fold_batch_norm requires an infer-mode model (call .eval() first)")
    folded = copy.deepcopy(model)
    fold_module_tree(folded)
    for m in folded.modules():
        if isinstance(m, FEB):
            m.fold()
    folded.aux_heads = []
    folded.folded = True
    return folded


def predict(model: SfanetModel, image: Tensor) -> np.ndarray:
    """Per-pixel argmax labels; ties resolve to the lowest class index."""
    if model.training:
        raise RuntimeError("predict requires an infer-mode model")
    with no_grad():
        logits = model(image)
    return logits.data.argmax(axis=1).astype(np.uint8)
