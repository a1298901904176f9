"""SFANet: stage-aware feature alignment network for real-time semantic segmentation, in numpy."""

from .autograd import NonFiniteError, Parameter, Tensor, backward, no_grad
from .data import ConfusionMatrix, SceneSpec, bench_fps, miou
from .network import SfanetConfig, SfanetModel, fold_batch_norm, predict, total_loss
from .training import TrainConfig, train_loop

__version__ = "0.1.0"

__all__ = [
    "ConfusionMatrix",
    "NonFiniteError",
    "Parameter",
    "SceneSpec",
    "SfanetConfig",
    "SfanetModel",
    "Tensor",
    "TrainConfig",
    "backward",
    "bench_fps",
    "fold_batch_norm",
    "miou",
    "no_grad",
    "predict",
    "total_loss",
    "train_loop",
]
