"""Multi-prototype semi-supervised segmentation lab.

A desk-scale implementation of prototype-correlation segmentation with an
over-segmentation head, a mutual-information regularizer on unlabeled
images, and a prototype-orthogonality penalty, together with the standard
semi-supervised comparison methods, on deterministic synthetic 2D data.
Gradients come from a minimal reverse-mode autodiff engine whose hot
kernels have a compiled lane and a NumPy fallback.
"""

__version__ = "0.1.0"

from .autodiff import Tensor, backward, finite_diff_gradcheck, no_grad
from .data import DatasetSpec, Sample, SplitIndex
from .losses import LossBreakdown, LossWeights
from .metrics import MetricsReport, dice, evaluate, seed_aggregate
from .network import (MappingMatrix, NetConfig, NetworkParams,
                      aggregate_classes, build_mapping, forward_features,
                      init_params, over_seg_probs, predict)
from .trainer import (EmaTeacher, OptimizerState, TrainConfig, TrainResult,
                      TrainingDiverged, ema_update, ramp_weight, sgd_step,
                      train, train_step)

__all__ = [
    "Tensor", "backward", "finite_diff_gradcheck", "no_grad",
    "DatasetSpec", "Sample", "SplitIndex",
    "LossBreakdown", "LossWeights",
    "MetricsReport", "dice", "evaluate", "seed_aggregate",
    "MappingMatrix", "NetConfig", "NetworkParams", "aggregate_classes",
    "build_mapping", "forward_features", "init_params", "over_seg_probs",
    "predict",
    "EmaTeacher", "OptimizerState", "TrainConfig", "TrainResult",
    "TrainingDiverged", "ema_update", "ramp_weight", "sgd_step", "train",
    "train_step",
    "__version__",
]
