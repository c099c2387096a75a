"""Dense-tensor autodiff core: the operator set the models are built from."""

from .tensor import Tensor, add, concat, matmul, mse, mul, no_grad, reshape, transpose
from .ops import (
    concat_channels,
    conv2d,
    group_norm,
    linear,
    nearest_upsample2x,
    self_attention,
    silu,
    softmax,
)
from .optim import AdamState, adam_step

__all__ = [
    "Tensor",
    "no_grad",
    "add",
    "mul",
    "matmul",
    "concat",
    "reshape",
    "transpose",
    "mse",
    "conv2d",
    "group_norm",
    "silu",
    "softmax",
    "linear",
    "nearest_upsample2x",
    "self_attention",
    "concat_channels",
    "AdamState",
    "adam_step",
]
