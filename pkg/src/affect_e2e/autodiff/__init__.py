"""Tensor library with reverse-mode autodiff, convolutions and Adam."""

from affect_e2e.autodiff import functional
from affect_e2e.autodiff.functional import (
    conv1d,
    conv2d,
    dropout,
    global_avg_pool2d,
    half_wave_rectify,
    max_pool2d,
    max_pool_channels,
    max_pool_time,
)
from affect_e2e.autodiff.module import Module
from affect_e2e.autodiff.optim import Adam, AdamState, adam_step, clip_grad_norm
from affect_e2e.autodiff.serialization import load_tensor, save_tensor
from affect_e2e.autodiff.tensor import Tape, Tensor, backward, no_grad

__all__ = [
    "Adam",
    "AdamState",
    "Module",
    "Tape",
    "Tensor",
    "adam_step",
    "backward",
    "clip_grad_norm",
    "conv1d",
    "conv2d",
    "dropout",
    "functional",
    "global_avg_pool2d",
    "half_wave_rectify",
    "load_tensor",
    "max_pool2d",
    "max_pool_channels",
    "max_pool_time",
    "no_grad",
    "save_tensor",
]
