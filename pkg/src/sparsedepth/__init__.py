"""Sparsity-aware convolutional depth-map completion.

Mask-normalized convolutions with observation-mask propagation, trainable
from scratch, plus classical completion baselines, the usual depth error
metrics, and a scan accumulation/cleaning pipeline for building depth
ground truth. See the README for the CLI and the acceptance suite.
"""

from .baselines import NWConfig, PoolConfig, closest_depth_pool, nadaraya_watson
from .data import SceneConfig, generate_scene, read_depth_pgm, sparsify, write_depth_pgm
from .estimators import ClosestPoolCompleter, CNNDepthCompleter, NadarayaWatsonCompleter
from .fusion import FusionConfig, accumulate, clean, fuse_pipeline
from .layers import (
    ConvParams,
    SparseConvConfig,
    conv2d_backward,
    conv2d_forward,
    mask_maxpool,
    normalized_skip_sum,
    sparse_conv2d_backward,
    sparse_conv2d_forward,
)
from .metrics import MetricsReport, evaluate
from .network import ModelState, NetworkSpec, build, forward, backward
from .optim import AdamState, TrainConfig, adam_step, masked_loss, train

__version__ = "0.1.0"

__all__ = [
    "CNNDepthCompleter",
    "NadarayaWatsonCompleter",
    "ClosestPoolCompleter",
    "ConvParams",
    "SparseConvConfig",
    "NetworkSpec",
    "ModelState",
    "TrainConfig",
    "AdamState",
    "MetricsReport",
    "SceneConfig",
    "NWConfig",
    "PoolConfig",
    "FusionConfig",
    "conv2d_forward",
    "conv2d_backward",
    "sparse_conv2d_forward",
    "sparse_conv2d_backward",
    "mask_maxpool",
    "normalized_skip_sum",
    "build",
    "forward",
    "backward",
    "train",
    "adam_step",
    "masked_loss",
    "evaluate",
    "generate_scene",
    "sparsify",
    "read_depth_pgm",
    "write_depth_pgm",
    "accumulate",
    "clean",
    "fuse_pipeline",
    "nadaraya_watson",
    "closest_depth_pool",
]
