"""Small numpy tensor kernel with reverse-mode differentiation."""

from .gradcheck import grad_check
from .layers import (Conv2d, Downsample, GroupNorm, Module, ReLU, ResidualBlock, SelfAttention,
                     Sequential, Sigmoid, Upsample, build_layer)
from .optim import AdamState, adam_step
from .tensor import (ConfigError, DimensionError, NumericError, Tensor, concat, conv2d,
                     group_norm, relu, set_debug, sigmoid, soft_dice_loss, upsample2x)

__all__ = [
    "AdamState", "ConfigError", "Conv2d", "DimensionError", "Downsample", "GroupNorm", "Module",
    "NumericError", "ReLU", "ResidualBlock", "SelfAttention", "Sequential", "Sigmoid", "Tensor",
    "Upsample", "adam_step", "build_layer", "concat", "conv2d", "grad_check", "group_norm", "relu",
    "set_debug", "sigmoid", "soft_dice_loss", "upsample2x",
]
