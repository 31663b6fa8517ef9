"""HRAN image super-resolution in plain numpy: model, training, data pipeline and metrics."""

from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .data import (
    ImageU8,
    PairedDataset,
    bicubic_resize,
    bicubic_upscale,
    degrade,
    load_image,
    rgb_to_y,
    save_image,
    to_float,
    to_u8,
)
from .errors import (
    CacheError,
    CheckpointError,
    ConfigError,
    DataError,
    HRANError,
    ImageFormatError,
    NumericalError,
    ShapeError,
)
from .metrics import EvalReport, evaluate, psnr_y, self_ensemble, ssim_y
from .model import HRAN, ModelConfig, ParamStore, hran_backward, hran_forward, init_params, param_count
from .rng import Rng
from .train import TrainConfig, adam_step, l1_loss, lr_at, train_loop

__version__ = "0.1.0"

__all__ = [
    "HRAN", "Checkpoint", "CacheError", "CheckpointError", "ConfigError", "DataError", "EvalReport",
    "HRANError", "ImageFormatError", "ImageU8", "ModelConfig", "NumericalError", "PairedDataset",
    "ParamStore", "Rng", "ShapeError", "TrainConfig", "adam_step", "bicubic_resize", "bicubic_upscale",
    "degrade", "evaluate", "hran_backward", "hran_forward", "init_params", "l1_loss", "load_checkpoint",
    "load_image", "lr_at", "param_count", "psnr_y", "rgb_to_y", "save_checkpoint", "save_image",
    "self_ensemble", "ssim_y", "to_float", "to_u8", "train_loop",
]
