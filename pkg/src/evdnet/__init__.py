"""End-to-end video dehazing with multi-frame fusion, plus a toy joint
dehazing + detection pipeline.

numpy throughout; the convolution kernels are compiled with numba unless
``EVDNET_BACKEND=numpy`` is set.
"""

__version__ = "0.1.0"

from ._backend import BACKEND
from .haze import HazeParams, apply_K, compute_K, invert_haze, synthesize_haze, transmission_from_depth
from .metrics import psnr, ssim
from .models import (
    EVDNet,
    FusionSpec,
    TABLE1_SPECS,
    Checkpoint,
    CheckpointError,
    build,
    load_checkpoint,
    param_count,
    save_checkpoint,
    split_init,
)
from .tensor import ContractError, NonFiniteGradientError
from .trainer import TrainConfig, TrainingError, evaluate, fusion_bench, train

__all__ = [
    "BACKEND",
    "Checkpoint",
    "CheckpointError",
    "ContractError",
    "EVDNet",
    "FusionSpec",
    "HazeParams",
    "NonFiniteGradientError",
    "TABLE1_SPECS",
    "TrainConfig",
    "TrainingError",
    "apply_K",
    "build",
    "compute_K",
    "evaluate",
    "fusion_bench",
    "invert_haze",
    "load_checkpoint",
    "param_count",
    "psnr",
    "save_checkpoint",
    "split_init",
    "ssim",
    "synthesize_haze",
    "train",
    "transmission_from_depth",
]
