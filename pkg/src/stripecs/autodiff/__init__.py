"""Minimal 4-D tensor engine with reverse-mode differentiation."""

from .gradcheck import grad_check
from .ops import (
    add,
    add_bias,
    batch_slice,
    bilinear_upsample2x,
    concat_batch,
    concat_channels,
    conv2d,
    conv_output_size,
    elementwise,
    leaky_relu,
    mean_all,
    mul,
    reduce,
    scale,
    sub,
    sum_all,
)
from .optim import AdamW, AdamWConfig, adamw_step
from .tensor import Parameter, Shape4, Tape, Tensor, active_tape, apply, backward

__all__ = [
    "AdamW",
    "AdamWConfig",
    "Parameter",
    "Shape4",
    "Tape",
    "Tensor",
    "active_tape",
    "adamw_step",
    "add",
    "add_bias",
    "apply",
    "backward",
    "batch_slice",
    "bilinear_upsample2x",
    "concat_batch",
    "concat_channels",
    "conv2d",
    "conv_output_size",
    "elementwise",
    "grad_check",
    "leaky_relu",
    "mean_all",
    "mul",
    "reduce",
    "scale",
    "sub",
    "sum_all",
]
