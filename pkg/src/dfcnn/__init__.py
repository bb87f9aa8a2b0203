"""Dual-feedback CNN: a self-contained engine for opacity screening.

Tensors, reverse-mode autodiff, the dual-feedback architecture, Adam
training with the floor-division fold scheme, and the metric suite
including the accuracy-parameter trade-off score.
"""

from .tensor import GradTape, ShapeError, Tensor, backward
from .ops import ConvSpec, bce_loss, concat_channels, conv2d, dense, maxpool2d, relu, sigmoid
from .blocks import DualFeedbackParams, ProcessConvParams, df_block, df_block_ablated, process_conv
from .model import (DEFAULT_BLOCKS, Network, NetworkConfig, build_network,
                    count_params, default_config, predict, summary_table)
from .training import (Checkpoint, FoldSpec, TrainConfig, adam_step, load_checkpoint,
                       make_folds, save_checkpoint, train)
from .evaluation import ConfusionMatrix, MetricsReport, apt, confusion, metrics
from .gradcheck import grad_check

__version__ = "0.1.0"

__all__ = [
    "GradTape", "ShapeError", "Tensor", "backward",
    "ConvSpec", "bce_loss", "concat_channels", "conv2d", "dense",
    "maxpool2d", "relu", "sigmoid",
    "DualFeedbackParams", "ProcessConvParams", "df_block", "df_block_ablated", "process_conv",
    "DEFAULT_BLOCKS", "Network", "NetworkConfig", "build_network",
    "count_params", "default_config", "predict", "summary_table",
    "Checkpoint", "FoldSpec", "TrainConfig", "adam_step", "load_checkpoint",
    "make_folds", "save_checkpoint", "train",
    "ConfusionMatrix", "MetricsReport", "apt", "confusion", "metrics",
    "grad_check",
    "__version__",
]
