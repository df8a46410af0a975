"""Universal undersampled-MRI reconstruction toolkit."""

__version__ = "0.1.0"

from .io_store import load_checkpoint, read_tensor, save_checkpoint, write_tensor
from .kspace import (
    SamplingMask,
    data_consistency,
    fft2c,
    ifft2c,
    make_gaussian_mask,
    undersample,
    zero_filled,
)
from .metrics import mae, psnr, ssim
from .model import AnatomyNormBank, CascadeNet, count_parameters, instance_norm
from .phantom import AnatomyProfile, PhantomDataset, generate_dataset, split_dataset
from .pipeline import (
    TrainConfig,
    adapt_new_anatomy,
    distill_universal,
    evaluate,
    pretrain_universal,
    train_independent,
)

__all__ = [
    "AnatomyNormBank",
    "AnatomyProfile",
    "CascadeNet",
    "PhantomDataset",
    "SamplingMask",
    "TrainConfig",
    "adapt_new_anatomy",
    "count_parameters",
    "data_consistency",
    "distill_universal",
    "evaluate",
    "fft2c",
    "generate_dataset",
    "ifft2c",
    "instance_norm",
    "load_checkpoint",
    "mae",
    "make_gaussian_mask",
    "pretrain_universal",
    "psnr",
    "read_tensor",
    "save_checkpoint",
    "split_dataset",
    "ssim",
    "train_independent",
    "undersample",
    "write_tensor",
    "zero_filled",
]
