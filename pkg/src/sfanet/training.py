"""Optimization: poly LR, momentum SGD with decoupled-from-BN weight decay, OHEM, augmentation."""

from __future__ import annotations

import logging
import queue
import threading
from dataclasses import dataclass, field, replace
from typing import Callable, Iterator

import numpy as np

from . import ops
from .autograd import NonFiniteError, Parameter, Tensor, no_grad
from .data import ConfusionMatrix, channel_mean, miou
from .network import SfanetModel, total_loss
from .ops import IGNORE_INDEX, interp_matrix

log = logging.getLogger(__name__)

# network inputs are (pixel - channel mean) / 255
INPUT_SCALE = 1.0 / 255.0
NO_DECAY_SUFFIXES = ("gamma", "beta", "bias")


class TrainingDiverged(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# schedule and optimizer


@dataclass
class PolySchedule:
    base_lr: float
    total_iters: int
    power: float = 0.9
    current_iter: int = 0

    def lr(self, iteration: int | None = None) -> float:
        return poly_lr(self, self.current_iter if iteration is None else iteration)


def poly_lr(schedule: PolySchedule, iteration: int) -> float:
    if not 0 <= iteration <= schedule.total_iters:
        raise ValueError(f"iteration {iteration} outside [0, {schedule.total_iters}]")
    return schedule.base_lr * (1 - iteration / schedule.total_iters) ** schedule.power


@dataclass
class OptimizerState:
    momentum: float = 0.9
    weight_decay: float = 5e-4
    buffers: dict[str, np.ndarray] = field(default_factory=dict)


def decays(name: str) -> bool:
    """Weight decay applies to convolution weights only."""
    return not name.rsplit(".", 1)[-1].endswith(NO_DECAY_SUFFIXES)


def sgd_step(params: dict[str, Parameter], state: OptimizerState, lr: float) -> None:
    """In-place momentum SGD: ``v = mu*v + (g + wd*p); p -= lr*v``.

    Parameters without a gradient are left untouched.
    """
    for name, p in params.items():
        if p.grad is None:
            continue
        g = p.grad
        if not np.isfinite(g).all():
            raise TrainingDiverged(f"non-finite gradient for {name}")
        if state.weight_decay and decays(name):
            g = g + state.weight_decay * p.data
        buf = state.buffers.get(name)
        if buf is None or buf.shape != p.shape:
            buf = np.zeros_like(p.data)
        buf = state.momentum * buf + g
        state.buffers[name] = buf.astype(p.dtype, copy=False)
        p.data = (p.data - lr * buf).astype(p.dtype, copy=False)


# ---------------------------------------------------------------------------
# OHEM


@dataclass
class OhemConfig:
    threshold: float = 0.7
    min_kept: int | None = None  # None: valid pixels // 16
    ignore_index: int = IGNORE_INDEX


def ohem_selection(logits: np.ndarray, labels: np.ndarray, config: OhemConfig) -> np.ndarray:
    """Boolean mask of kept pixels.

    Pixels whose true-class probability is below the threshold are kept;
    if fewer than ``min_kept`` qualify, the ``min_kept`` highest-loss valid
    pixels are kept instead. A threshold >= 1 keeps every valid pixel.
    """
    nll, valid, _ = ops.pixel_nll(logits, labels, config.ignore_index)
    n_valid = int(valid.sum())
    if n_valid == 0:
        raise ValueError("ohem: no valid pixels")
    if config.threshold >= 1:
        return valid
    hard = valid & (np.exp(-nll) < config.threshold)
    min_kept = config.min_kept if config.min_kept is not None else n_valid // 16
    min_kept = min(max(min_kept, 1), n_valid)
    if hard.sum() >= min_kept:
        return hard
    flat_loss = np.where(valid, nll, -np.inf).reshape(-1)
    order = np.argsort(-flat_loss, kind="stable")[:min_kept]
    kept = np.zeros(flat_loss.size, dtype=bool)
    kept[order] = True
    return kept.reshape(labels.shape)


def ohem_cross_entropy(logits: Tensor, labels: np.ndarray, config: OhemConfig | None = None) -> Tensor:
    config = config or OhemConfig()
    kept = ohem_selection(logits.data, np.asarray(labels), config)
    return ops.cross_entropy(logits, labels, weights=kept.astype(np.float64), ignore_index=config.ignore_index)


# ---------------------------------------------------------------------------
# augmentation


@dataclass
class AugmentationConfig:
    flip_prob: float = 0.5
    scale_range: tuple[float, float] = (0.5, 2.0)
    crop_hw: tuple[int, int] = (64, 64)
    mean: tuple[float, float, float] | None = None  # None: training-set channel mean

    def __post_init__(self):
        self.scale_range = tuple(float(v) for v in self.scale_range)
        self.crop_hw = tuple(int(v) for v in self.crop_hw)
        if self.mean is not None:
            self.mean = tuple(float(v) for v in self.mean)


@dataclass(frozen=True)
class AugmentDraw:
    flip: bool
    scale: float
    crop_y: int
    crop_x: int


def scaled_extent(h: int, w: int, scale: float) -> tuple[int, int]:
    return max(1, int(round(h * scale))), max(1, int(round(w * scale)))


def sample_draw(config: AugmentationConfig, hw: tuple[int, int], rng: np.random.Generator) -> AugmentDraw:
    flip = bool(rng.random() < config.flip_prob)
    scale = float(rng.uniform(*config.scale_range))
    sh, sw = scaled_extent(*hw, scale)
    ch, cw = config.crop_hw
    crop_y = int(rng.integers(0, max(sh - ch, 0) + 1))
    crop_x = int(rng.integers(0, max(sw - cw, 0) + 1))
    return AugmentDraw(flip, scale, crop_y, crop_x)


def resize_bilinear(image: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    h, w = image.shape[:2]
    if (h, w) == (out_h, out_w):
        return image.astype(np.float64)
    mh, mw = interp_matrix(h, out_h), interp_matrix(w, out_w)
    img = image.astype(np.float64)
    if img.ndim == 2:
        return mh @ img @ mw.T
    rows = np.tensordot(mh, img, axes=1)  # (out_h, w, c)
    return np.tensordot(mw, rows, axes=([1], [1])).transpose(1, 0, 2)


def resize_nearest(array: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    h, w = array.shape[:2]
    rows = np.minimum(((np.arange(out_h) + 0.5) * h / out_h).astype(np.int64), h - 1)
    cols = np.minimum(((np.arange(out_w) + 0.5) * w / out_w).astype(np.int64), w - 1)
    return array[rows][:, cols]


def apply_geometry(array: np.ndarray, draw: AugmentDraw, crop_hw, mode: str, fill) -> np.ndarray:
    """Scale, flip, pad with ``fill`` and crop an HxW or HxWxC array."""
    sh, sw = scaled_extent(array.shape[0], array.shape[1], draw.scale)
    out = resize_bilinear(array, sh, sw) if mode == "bilinear" else resize_nearest(array, sh, sw)
    if draw.flip:
        out = out[:, ::-1]
    ch, cw = crop_hw
    ph, pw = max(ch - sh, 0), max(cw - sw, 0)
    if not (0 <= draw.crop_y <= sh + ph - ch and 0 <= draw.crop_x <= sw + pw - cw):
        raise ValueError(f"crop at ({draw.crop_y}, {draw.crop_x}) of {ch}x{cw} exceeds the {sh + ph}x{sw + pw} padded image")
    if ph or pw:
        pad = ((0, ph), (0, pw)) + ((0, 0),) * (out.ndim - 2)
        out = np.pad(out, pad, constant_values=fill)
    return np.ascontiguousarray(out[draw.crop_y:draw.crop_y + ch, draw.crop_x:draw.crop_x + cw])


def augment(image: np.ndarray, labels: np.ndarray, config: AugmentationConfig, rng=None, draw=None):
    """Random flip/scale/crop with mean subtraction.

    Returns (float32 HxWx3 mean-subtracted image, uint8 labels). Regions
    outside the scaled image are filled with the mean (0 after subtraction)
    and the ignore label.
    """
    if image.shape[:2] != labels.shape:
        raise ValueError(f"image {image.shape} and labels {labels.shape} differ in extents")
    if draw is None:
        draw = sample_draw(config, labels.shape, rng)
    if config.mean is None:
        raise ValueError("augmentation mean is unresolved; see resolve_mean")
    centred = image.astype(np.float64) - np.asarray(config.mean)
    img = apply_geometry(centred, draw, config.crop_hw, "bilinear", 0.0)
    lab = apply_geometry(labels, draw, config.crop_hw, "nearest", IGNORE_INDEX)
    return img.astype(np.float32), lab.astype(np.uint8)


def to_input(images: np.ndarray, dtype=np.float32) -> Tensor:
    """Stack of mean-subtracted HxWx3 images -> scaled N x 3 x H x W tensor."""
    arr = np.asarray(images, dtype=np.float64)
    if arr.ndim == 3:
        arr = arr[None]
    return Tensor((arr.transpose(0, 3, 1, 2) * INPUT_SCALE).astype(dtype))


def prepare_images(images: np.ndarray, mean) -> Tensor:
    return to_input(np.asarray(images, dtype=np.float64) - np.asarray(mean, dtype=np.float64))


# ---------------------------------------------------------------------------
# training loop


@dataclass
class TrainConfig:
    base_lr: float = 0.01
    total_iters: int = 2000
    batch_size: int = 8
    power: float = 0.9
    momentum: float = 0.9
    weight_decay: float = 5e-4
    seed: int = 0
    eval_every: int = 0  # 0 disables periodic validation
    prefetch: int = 2  # bounded queue depth for batch production; 0 = inline
    ohem: OhemConfig = field(default_factory=OhemConfig)
    augment: AugmentationConfig = field(default_factory=AugmentationConfig)


@dataclass
class TrainState:
    iteration: int
    optimizer: OptimizerState
    schedule: PolySchedule
    lambdas: tuple[float, ...]
    seed: int
    history: list[dict] = field(default_factory=list)
    mean: tuple[float, float, float] | None = None  # input mean the run normalizes with


def make_batch(dataset, config: TrainConfig, iteration: int):
    """Batch for one iteration; depends only on (seed, iteration)."""
    rng = np.random.default_rng([config.seed, iteration])
    n = len(dataset)
    idx = rng.choice(n, size=config.batch_size, replace=n < config.batch_size)
    images, labels = [], []
    for i in idx:
        img, lab = augment(*dataset[int(i)], config.augment, rng)
        images.append(img)
        labels.append(lab)
    return to_input(np.stack(images)), np.stack(labels)


def _batches(dataset, config: TrainConfig, start: int) -> Iterator:
    if config.prefetch <= 0:
        for it in range(start, config.total_iters):
            yield make_batch(dataset, config, it)
        return
    q: queue.Queue = queue.Queue(maxsize=config.prefetch)
    stop = threading.Event()

    def produce():
        try:
            for it in range(start, config.total_iters):
                item = make_batch(dataset, config, it)
                while not stop.is_set():
                    try:
                        q.put(item, timeout=0.1)
                        break
                    except queue.Full:
                        continue
                if stop.is_set():
                    return
        except BaseException as exc:  # surfaced on the consumer side
            q.put(exc)

    worker = threading.Thread(target=produce, name="batch-producer", daemon=True)
    worker.start()
    try:
        for _ in range(start, config.total_iters):
            item = q.get()
            if isinstance(item, BaseException):
                raise item
            yield item
    finally:
        stop.set()
        worker.join(timeout=5)


def _cast(x: Tensor, model) -> Tensor:
    dtype = model.dtype
    return x if x.dtype == dtype else Tensor(x.data.astype(dtype))


def aux_flags(lambdas, log_all: bool = True) -> tuple:
    """Differentiable heads where lambda != 0; value-only (for logging) elsewhere."""
    return tuple(True if lam != 0 else ("value" if log_all else False) for lam in lambdas)


def evaluate(model: SfanetModel, dataset, mean, batch_size: int = 16) -> ConfusionMatrix:
    was_training = model.training
    model.eval()
    cm = ConfusionMatrix(model.config.num_classes)
    try:
        with no_grad():
            for start in range(0, len(dataset), batch_size):
                items = [dataset[i] for i in range(start, min(start + batch_size, len(dataset)))]
                x = _cast(prepare_images(np.stack([img for img, _ in items]), mean), model)
                pred = model(x).data.argmax(axis=1)
                cm.update(pred, np.stack([lab for _, lab in items]))
    finally:
        model.train(was_training)
    return cm


def resolve_mean(config: TrainConfig, train_set) -> TrainConfig:
    """Copy of ``config`` with the augmentation mean filled in from ``train_set`` if unset."""
    if config.augment.mean is not None:
        return config
    mean = tuple(float(v) for v in channel_mean(train_set))
    return replace(config, augment=replace(config.augment, mean=mean))


def new_state(model: SfanetModel, config: TrainConfig) -> TrainState:
    return TrainState(
        iteration=0,
        optimizer=OptimizerState(config.momentum, config.weight_decay),
        schedule=PolySchedule(config.base_lr, config.total_iters, config.power),
        lambdas=tuple(model.config.lambdas),
        seed=config.seed,
    )


def train_loop(
    model: SfanetModel,
    train_set,
    config: TrainConfig,
    val_set=None,
    state: TrainState | None = None,
    on_record: Callable[[dict], None] | None = None,
    on_checkpoint: Callable[[TrainState], None] | None = None,
    checkpoint_every: int | None = None,
) -> TrainState:
    """Run SGD from ``state.iteration`` (0 for a fresh state) to ``total_iters``."""
    state = state or new_state(model, config)
    config = resolve_mean(config, train_set)
    state.mean = config.augment.mean
    if state.schedule.total_iters != config.total_iters:
        raise ValueError("resumed state was created for a different total_iters")
    params = dict(model.named_parameters())
    flags = aux_flags(state.lambdas)
    principal = lambda z, y: ohem_cross_entropy(z, y, config.ohem)  # noqa: E731
    model.train()
    every = checkpoint_every or max(1, config.total_iters // 20)

    for it, (x, labels) in zip(range(state.iteration, config.total_iters), _batches(train_set, config, state.iteration)):
        lr = poly_lr(state.schedule, it)
        try:
            main, aux = model(_cast(x, model), aux=flags)
            bundle = total_loss(main, aux, labels, state.lambdas, principal)
        except NonFiniteError as exc:
            raise TrainingDiverged(f"iteration {it}: {exc} (lr={lr:g})") from exc
        if not np.isfinite(bundle.total.item()):
            raise TrainingDiverged(f"iteration {it}: loss is {bundle.total.item()} (lr={lr:g})")
        model.zero_grad()
        bundle.total.backward()
        sgd_step(params, state.optimizer, lr)

        record = {"iter": it, "lr": lr, **bundle.values()}
        state.iteration = it + 1
        state.schedule.current_iter = state.iteration
        if val_set is not None and config.eval_every and (state.iteration % config.eval_every == 0 or state.iteration == config.total_iters):
            record["val_miou"] = miou(evaluate(model, val_set, config.augment.mean))
            model.train()
        state.history.append(record)
        if on_record is not None:
            on_record(record)
        if on_checkpoint is not None and (state.iteration % every == 0 or state.iteration == config.total_iters):
            on_checkpoint(state)
    return state
