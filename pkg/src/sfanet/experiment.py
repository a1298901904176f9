"""Desk-scale end-to-end experiment: train on synthetic scenes, score held-out mIoU."""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .data import SceneSet, SceneSpec, channel_mean, miou
from .network import SfanetConfig, SfanetModel
from .training import AugmentationConfig, TrainConfig, evaluate, train_loop


@dataclass
class DeskSetup:
    width: float = 0.25
    num_classes: int = 4
    extent: int = 64
    train_count: int = 1000
    val_count: int = 100
    batch_size: int = 8
    base_lr: float = 0.01
    power: float = 0.9
    total_iters: int = 2000
    ohem_threshold: float = 0.7
    seed: int = 0
    eval_every: int = 500


@dataclass
class DeskResult:
    lambdas: tuple[float, float, float, float]
    miou: float
    class_iou: list[float]
    seconds: float
    curve: list[tuple[int, float]] = field(default_factory=list)  # (iteration, val mIoU)
    final_loss: float = float("nan")


def scene_splits(setup: DeskSetup) -> tuple[SceneSet, SceneSet]:
    spec = SceneSpec(height=setup.extent, width=setup.extent, num_classes=setup.num_classes, seed=setup.seed)
    train = SceneSet(spec, range(setup.train_count))
    val = SceneSet(spec, range(setup.train_count, setup.train_count + setup.val_count))
    return train, val


def run_desk(lambdas, setup: DeskSetup | None = None, splits=None, log=None) -> DeskResult:
    """Train one model with the given auxiliary weights and evaluate it on the held-out split."""
    setup = setup or DeskSetup()
    train_set, val_set = splits or scene_splits(setup)
    mean = tuple(float(v) for v in channel_mean(train_set))
    config = TrainConfig(
        base_lr=setup.base_lr,
        total_iters=setup.total_iters,
        batch_size=setup.batch_size,
        power=setup.power,
        seed=setup.seed,
        eval_every=setup.eval_every,
        augment=AugmentationConfig(crop_hw=(setup.extent, setup.extent), mean=mean),
    )
    config.ohem.threshold = setup.ohem_threshold
    model = SfanetModel(
        SfanetConfig(num_classes=setup.num_classes, width=setup.width, input_hw=(setup.extent,) * 2,
                     lambdas=tuple(lambdas), seed=setup.seed)
    )
    curve: list[tuple[int, float]] = []

    def on_record(rec):
        if "val_miou" in rec:
            curve.append((rec["iter"] + 1, rec["val_miou"]))
            if log is not None:
                log(f"lambdas={tuple(lambdas)} iter={rec['iter'] + 1} loss={rec['loss']:.4f} val_miou={rec['val_miou']:.4f}")

    t0 = time.perf_counter()
    state = train_loop(model, train_set, config, val_set, on_record=on_record)
    cm = evaluate(model, val_set, mean)
    return DeskResult(
        lambdas=tuple(float(v) for v in lambdas),
        miou=miou(cm),
        class_iou=[float(v) for v in np.nan_to_num(cm.class_iou(), nan=0.0)],
        seconds=time.perf_counter() - t0,
        curve=curve,
        final_loss=state.history[-1]["loss"] if state.history else float("nan"),
    )
