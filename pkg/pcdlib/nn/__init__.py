"""Neural network layers built on the pcdlib tensor engine."""

from . import functional
from .base import Module, Parameter, Sequential, frozen_buffers
from .layers import (
    BatchNorm,
    CWReLU,
    Conv2d,
    Linear,
    MultiHeadSelfAttention,
    ReLU,
    layer_from_description,
)

__all__ = [
    "BatchNorm",
    "CWReLU",
    "Conv2d",
    "Linear",
    "Module",
    "MultiHeadSelfAttention",
    "Parameter",
    "ReLU",
    "Sequential",
    "frozen_buffers",
    "functional",
    "layer_from_description",
]
