#!/usr/bin/env python3
"""Layer modules: Linear, Conv2d, BatchNorm, ReLU, CWReLU, MultiHeadSelfAttention."""

import math
from typing import Any, Dict, Optional

import numpy as np

from ..exceptions import ShapeError, ValidationError
from ..rng import SplitMix64
from ..tensor import Tensor, relu
from . import functional as F
from .base import Module, Parameter

BN_EPS = 1e-5
BN_MOMENTUM = 0.1


def kaiming_normal(rng: SplitMix64, shape, fan_in: int) -> np.ndarray:
    """Gaussian init with std ``sqrt(2 / fan_in)``."""
    std = math.sqrt(2.0 / fan_in)
    return (std * rng.gaussian(int(np.prod(shape)))).reshape(shape)


class Linear(Module):
    """Fully connected layer (``FC`` in head specs)."""

    kind = "fc"

    def __init__(self, in_features: int, out_features: int, bias: bool = True, rng: SplitMix64 = None) -> None:
        super().__init__()
        rng = rng or SplitMix64(0)
        self.in_features = in_features
        self.out_features = out_features
        self.weight = Parameter(kaiming_normal(rng, (out_features, in_features), in_features))
        self.bias = Parameter(np.zeros(out_features), decay=False) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        return F.linear(x, self.weight, self.bias)

    def describe(self) -> Dict[str, Any]:
        return {"kind": self.kind, "in": self.in_features, "out": self.out_features, "bias": self.bias is not None}


class Conv2d(Module):
    """2-D convolution; a 1x1 stride-1 instance reports kind ``conv1x1``."""

    def __init__(
        self,
        in_channels: int,
        out_channels: int,
        kernel_size: int = 1,
        stride: int = 1,
        padding: int = 0,
        bias: bool = True,
        rng: SplitMix64 = None,
    ) -> None:
        super().__init__()
        if kernel_size < 1 or stride < 1 or padding < 0:
            raise ValidationError("conv2d needs kernel_size >= 1, stride >= 1, padding >= 0")
        rng = rng or SplitMix64(0)
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.kernel_size = kernel_size
        self.stride = stride
        self.padding = padding
        fan_in = in_channels * kernel_size * kernel_size
        self.kernel = Parameter(
            kaiming_normal(rng, (out_channels, in_channels, kernel_size, kernel_size), fan_in)
        )
        self.bias = Parameter(np.zeros(out_channels), decay=False) if bias else None

    @property
    def kind(self) -> str:
        return "conv1x1" if self.kernel_size == 1 and self.stride == 1 and self.padding == 0 else "conv"

    def forward(self, x: Tensor) -> Tensor:
        return F.conv2d(x, self.kernel, self.bias, self.stride, self.padding)

    def describe(self) -> Dict[str, Any]:
        return {
            "kind": self.kind,
            "in": self.in_channels,
            "out": self.out_channels,
            "kernel_size": self.kernel_size,
            "stride": self.stride,
            "padding": self.padding,
            "bias": self.bias is not None,
        }


class BatchNorm(Module):
    """Batch normalization over ``[N, C]`` vectors or ``[N, C, H, W]`` maps.

    In training mode batch statistics are used and running statistics are
    updated with ``momentum`` (unbiased variance); in inference mode the layer
    is the per-channel affine defined by the running statistics.
    """

    kind = "bn"

    def __init__(
        self,
        channels: int,
        affine: bool = True,
        layout: str = "map",
        eps: float = BN_EPS,
        momentum: float = BN_MOMENTUM,
    ) -> None:
        super().__init__()
        if layout not in ("vector", "map"):
            raise ValidationError(f"unknown batchnorm layout '{layout}'", field="layout", value=layout)
        self.channels = channels
        self.layout = layout
        self.eps = eps
        self.momentum = momentum
        self.gamma = Parameter(np.ones(channels), decay=False) if affine else None
        self.beta = Parameter(np.zeros(channels), decay=False) if affine else None
        self._buffers["running_mean"] = np.zeros(channels, dtype=np.float32)
        self._buffers["running_var"] = np.ones(channels, dtype=np.float32)

    @property
    def affine(self) -> bool:
        return self.gamma is not None

    @property
    def mode(self) -> str:
        return "train" if self.training else "inference"

    @property
    def running_mean(self) -> np.ndarray:
        return self._buffers["running_mean"]

    @property
    def running_var(self) -> np.ndarray:
        return self._buffers["running_var"]

    def set_running_stats(self, mean: np.ndarray, var: np.ndarray) -> None:
        if np.any(np.asarray(var) < 0):
            raise ValidationError("running_var must be non-negative", field="running_var")
        self._buffers["running_mean"] = np.array(mean, dtype=np.float32).reshape(self.channels)
        self._buffers["running_var"] = np.array(var, dtype=np.float32).reshape(self.channels)

    def forward(self, x: Tensor) -> Tensor:
        if x.ndim < 2 or x.shape[1] != self.channels:
            raise ShapeError("batchnorm", message=f"batchnorm: expected {self.channels} channels, got shape {list(x.shape)}")
        if not self.training:
            return F.batchnorm_inference(
                x, self.gamma, self.beta, self.running_mean, self.running_var, self.eps, self.layout
            )
        out, mean, var = F.batchnorm_train(x, self.gamma, self.beta, self.eps, self.layout)
        count = x.size // self.channels
        unbiased = var * count / (count - 1) if count > 1 else var
        m = self.momentum
        self._buffers["running_mean"] = ((1 - m) * self.running_mean + m * mean).astype(np.float32)
        self._buffers["running_var"] = ((1 - m) * self.running_var + m * unbiased).astype(np.float32)
        return out

    def describe(self) -> Dict[str, Any]:
        return {"kind": self.kind, "channels": self.channels, "affine": self.affine, "layout": self.layout, "eps": self.eps}


class ReLU(Module):
    kind = "relu"

    def forward(self, x: Tensor) -> Tensor:
        return relu(x)

    def describe(self) -> Dict[str, Any]:
        return {"kind": self.kind}


class CWReLU(Module):
    """Channel-wise ReLU (zeroes whole channels with negative spatial mean)."""

    kind = "cw_relu"

    def forward(self, x: Tensor) -> Tensor:
        return F.cw_relu(x)

    def describe(self) -> Dict[str, Any]:
        return {"kind": self.kind}


class MultiHeadSelfAttention(Module):
    """Spatial multi-head self-attention with 1x1 q/k/v/output projections.

    The q/k/v convolutions hold all heads stacked along the output channel
    axis (head ``i`` owns rows ``i*head_dim:(i+1)*head_dim``).
    """

    kind = "mhsa"

    def __init__(self, channels: int, heads: int = 8, head_dim: int = 64, rng: SplitMix64 = None) -> None:
        super().__init__()
        if heads < 1 or head_dim < 1:
            raise ValidationError("mhsa needs heads >= 1 and head_dim >= 1")
        rng = rng or SplitMix64(0)
        self.channels = channels
        self.heads = heads
        self.head_dim = head_dim
        inner = heads * head_dim
        self.q = Conv2d(channels, inner, 1, rng=rng)
        self.k = Conv2d(channels, inner, 1, rng=rng)
        self.v = Conv2d(channels, inner, 1, rng=rng)
        self.out = Conv2d(inner, channels, 1, rng=rng)

    def forward(self, x: Tensor) -> Tensor:
        return F.mhsa(x, self)

    def attention(self, x: Tensor) -> np.ndarray:
        return F.mhsa_attention(x, self)[0].data

    def describe(self) -> Dict[str, Any]:
        return {"kind": self.kind, "channels": self.channels, "heads": self.heads, "head_dim": self.head_dim}


def layer_from_description(desc: Dict[str, Any], rng: Optional[SplitMix64] = None) -> Module:
    """Rebuild an (uninitialized) layer from its ``describe()`` dict."""
    kind = desc.get("kind")
    if kind == "fc":
        return Linear(desc["in"], desc["out"], bias=desc.get("bias", True), rng=rng)
    if kind in ("conv", "conv1x1"):
        return Conv2d(
            desc["in"],
            desc["out"],
            desc.get("kernel_size", 1),
            desc.get("stride", 1),
            desc.get("padding", 0),
            bias=desc.get("bias", True),
            rng=rng,
        )
    if kind == "bn":
        return BatchNorm(desc["channels"], affine=desc.get("affine", True), layout=desc.get("layout", "map"), eps=desc.get("eps", BN_EPS))
    if kind == "relu":
        return ReLU()
    if kind == "cw_relu":
        return CWReLU()
    if kind == "mhsa":
        return MultiHeadSelfAttention(desc["channels"], desc["heads"], desc["head_dim"], rng=rng)
    raise ValidationError(f"unknown layer kind '{kind}'", field="kind", value=kind)
