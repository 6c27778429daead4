#!/usr/bin/env python3
"""SpatialAdaptor: rewrite vector-input projection heads into map-input heads.

A vector head ``FC / BN / ReLU`` (in any stacked order) becomes a map head
``Conv1x1 / BN / CW-ReLU`` such that

    original(global_avg_pool(x)) == global_avg_pool(adapted(x))

for every feature map ``x``. FC layers become 1x1 convolutions with the same
weights, inference-mode BN keeps its statistics and affine parameters, and
ReLU becomes the channel-wise ReLU.
"""

import logging
from dataclasses import dataclass
from typing import Any, Dict, List, Optional

import numpy as np

from .exceptions import AdaptationError, AlreadyAdaptedError, ShapeError, ValidationError
from .nn import BatchNorm, CWReLU, Conv2d, Linear, Module, ReLU, Sequential, layer_from_description
from .nn.functional import global_avg_pool
from .rng import SplitMix64
from .tensor import Tensor, double_precision, no_grad

logger = logging.getLogger("pcdlib")

VECTOR = "vector"
MAP = "map"
ACTIVATIONS = ("cw_relu", "relu")

_VECTOR_KINDS = {"fc", "bn", "relu"}
_MAP_KINDS = {"conv1x1", "bn", "cw_relu", "relu"}


def _assign(param, array: np.ndarray) -> None:
    param.data = np.array(array, dtype=param.data.dtype).reshape(param.shape)
    param.grad = None


class HeadSpec(Sequential):
    """Projection head: an ordered layer list plus the kind of input it consumes."""

    kind = "head"

    def __init__(self, *layers: Module, input_kind: str = VECTOR) -> None:
        if input_kind not in (VECTOR, MAP):
            raise ValidationError(f"unknown head input kind '{input_kind}'", field="input_kind", value=input_kind)
        super().__init__(*layers)
        self.input_kind = input_kind

    @property
    def layer_kinds(self) -> List[str]:
        return [layer.kind for layer in self]

    @property
    def in_features(self) -> int:
        for layer in self:
            if isinstance(layer, Linear):
                return layer.in_features
            if isinstance(layer, Conv2d):
                return layer.in_channels
            if isinstance(layer, BatchNorm):
                return layer.channels
        raise AdaptationError("head has no layer with a feature dimension")

    @property
    def out_features(self) -> int:
        dim = None
        for layer in self:
            if isinstance(layer, Linear):
                dim = layer.out_features
            elif isinstance(layer, Conv2d):
                dim = layer.out_channels
            elif isinstance(layer, BatchNorm) and dim is None:
                dim = layer.channels
        return dim if dim is not None else self.in_features

    def validate(self) -> None:
        """Check the layer grammar and that adjacent dims chain."""
        if len(self) == 0:
            raise AdaptationError("head has no layers")
        allowed = _VECTOR_KINDS if self.input_kind == VECTOR else _MAP_KINDS
        dim: Optional[int] = None
        for index, layer in enumerate(self):
            if layer.kind not in allowed:
                raise AdaptationError(
                    f"layer {index} ({layer.kind}) is not allowed in a {self.input_kind}-kind head"
                )
            if isinstance(layer, BatchNorm) and layer.layout != self.input_kind:
                raise AdaptationError(f"layer {index}: {layer.layout} batchnorm in a {self.input_kind}-kind head")
            if isinstance(layer, Linear):
                layer_in, layer_out = layer.in_features, layer.out_features
            elif isinstance(layer, Conv2d):
                layer_in, layer_out = layer.in_channels, layer.out_channels
            elif isinstance(layer, BatchNorm):
                layer_in = layer_out = layer.channels
            else:
                continue
            if dim is not None and layer_in != dim:
                raise ShapeError("head", message=f"head layer {index} expects {layer_in} features, previous layer emits {dim}")
            dim = layer_out

    def describe(self) -> Dict[str, Any]:
        return {"input_kind": self.input_kind, "layers": [layer.describe() for layer in self]}

    @classmethod
    def from_description(cls, desc: Dict[str, Any]) -> "HeadSpec":
        layers = [layer_from_description(d) for d in desc["layers"]]
        return cls(*layers, input_kind=desc["input_kind"])


def fuse_fc_bn(fc: Linear, bn: BatchNorm) -> Linear:
    """Fold an inference-mode BN into the preceding FC layer.

    ``W' = diag(s) W`` and ``b' = s (b - mean) + beta`` with
    ``s = gamma / sqrt(var + eps)``.
    """
    if bn.training:
        raise AdaptationError("fuse_fc_bn needs batchnorm in inference mode")
    if bn.channels != fc.out_features:
        raise ShapeError("fuse_fc_bn", f"[{fc.out_features}] channels", f"[{bn.channels}] channels")
    weight, bias = _folded(fc.weight.data, None if fc.bias is None else fc.bias.data, bn)
    fused = Linear(fc.in_features, fc.out_features, bias=True)
    _assign(fused.weight, weight)
    _assign(fused.bias, bias)
    fused.eval()
    return fused


def fuse_conv_bn(conv: Conv2d, bn: BatchNorm) -> Conv2d:
    """Fold an inference-mode map BN into the preceding convolution."""
    if bn.training:
        raise AdaptationError("fuse_conv_bn needs batchnorm in inference mode")
    if bn.channels != conv.out_channels:
        raise ShapeError("fuse_conv_bn", f"[{conv.out_channels}] channels", f"[{bn.channels}] channels")
    kernel, bias = _folded(conv.kernel.data, None if conv.bias is None else conv.bias.data, bn)
    fused = Conv2d(conv.in_channels, conv.out_channels, conv.kernel_size, conv.stride, conv.padding, bias=True)
    _assign(fused.kernel, kernel)
    _assign(fused.bias, bias)
    fused.eval()
    return fused


def _folded(weight: np.ndarray, bias: Optional[np.ndarray], bn: BatchNorm):
    c = bn.channels
    gamma = bn.gamma.data.astype(np.float64) if bn.affine else np.ones(c)
    beta = bn.beta.data.astype(np.float64) if bn.affine else np.zeros(c)
    s = gamma / np.sqrt(bn.running_var.astype(np.float64) + bn.eps)
    b = np.zeros(c) if bias is None else bias.astype(np.float64)
    w = weight.astype(np.float64) * s.reshape((c,) + (1,) * (weight.ndim - 1))
    return w, s * (b - bn.running_mean.astype(np.float64)) + beta


def fc_to_conv1x1(fc: Linear) -> Conv2d:
    """Reshape ``weight[out, in]`` into a 1x1 kernel ``[out, in, 1, 1]``; bias copied."""
    conv = Conv2d(fc.in_features, fc.out_features, 1, bias=fc.bias is not None)
    _assign(conv.kernel, fc.weight.data.reshape(fc.out_features, fc.in_features, 1, 1))
    if fc.bias is not None:
        _assign(conv.bias, fc.bias.data)
    conv.train(fc.training)
    return conv


def _bn_to_map(bn: BatchNorm) -> BatchNorm:
    out = BatchNorm(bn.channels, affine=bn.affine, layout=MAP, eps=bn.eps, momentum=bn.momentum)
    if bn.affine:
        _assign(out.gamma, bn.gamma.data)
        _assign(out.beta, bn.beta.data)
    out.set_running_stats(bn.running_mean, bn.running_var)
    out.train(bn.training)
    return out


def drop_trailing_bn(head: HeadSpec) -> HeadSpec:
    """Copy of ``head`` without its final layer when that layer is an affine-free BN."""
    layers = list(head)
    last = layers[-1] if layers else None
    if isinstance(last, BatchNorm) and not last.affine and len(layers) > 1:
        logger.debug(f"dropping trailing affine-free batchnorm ({last.channels} channels)")
        layers = layers[:-1]
    out = HeadSpec(*layers, input_kind=head.input_kind)
    out.training = head.training
    return out


def adapt_head(
    head: HeadSpec,
    drop_trailing_affine_free_bn: bool = False,
    activation: str = "cw_relu",
) -> HeadSpec:
    """Rewrite a vector-kind head into a map-kind head.

    Args:
        head: vector-kind head following the FC / BN / ReLU grammar
        drop_trailing_affine_free_bn: remove a final affine-free BN before adapting
        activation: ``cw_relu`` (invariant rewrite) or ``relu`` (plain ReLU kept
            on maps; not invariant, used for ablations)

    Returns:
        A new map-kind head in inference mode; ``head`` is left untouched.
    """
    if head.input_kind == MAP:
        raise AlreadyAdaptedError()
    if activation not in ACTIVATIONS:
        raise ValidationError(f"unknown activation '{activation}'", field="activation", value=activation)
    head.validate()
    if drop_trailing_affine_free_bn:
        head = drop_trailing_bn(head)

    layers: List[Module] = []
    for layer in head:
        if isinstance(layer, Linear):
            layers.append(fc_to_conv1x1(layer))
        elif isinstance(layer, BatchNorm):
            layers.append(_bn_to_map(layer))
        elif isinstance(layer, ReLU):
            layers.append(CWReLU() if activation == "cw_relu" else ReLU())
        else:
            raise AdaptationError(f"unknown layer kind '{layer.kind}' in head")
    adapted = HeadSpec(*layers, input_kind=MAP)
    adapted.eval()
    logger.debug(f"adapted head {'-'.join(head.layer_kinds)} -> {'-'.join(adapted.layer_kinds)}")
    return adapted


@dataclass
class InvarianceReport:
    """Outcome of :func:`verify_invariance`."""

    max_abs_dev: float
    tol: float
    trials: int
    spatial_size: int
    passed: bool

    def lines(self) -> List[str]:
        status = "PASS" if self.passed else "FAIL"
        return [
            f"invariance: {status}",
            f"  trials: {self.trials}",
            f"  spatial size: {self.spatial_size}x{self.spatial_size}",
            f"  max |original(pool(x)) - pool(adapted(x))|: {self.max_abs_dev:.3e}",
            f"  tolerance: {self.tol:.1e}",
        ]


def verify_invariance(
    original: HeadSpec,
    adapted: HeadSpec,
    trials: int = 64,
    spatial_size: int = 7,
    tol: float = 1e-5,
    seed: int = 0,
    drop_trailing_affine_free_bn: bool = False,
) -> InvarianceReport:
    """Compare ``original(pool(x))`` with ``pool(adapted(x))`` on Gaussian maps.

    Both heads are evaluated in inference mode with float64 activations.
    When the adapted head was built with the trailing-BN drop, pass the same
    flag so the original is compared with that layer removed as well.
    """
    if trials < 1 or spatial_size < 1:
        raise ValidationError("verify_invariance needs trials >= 1 and spatial_size >= 1")
    if drop_trailing_affine_free_bn:
        original = drop_trailing_bn(original)
    if original.in_features != adapted.in_features or original.out_features != adapted.out_features:
        raise ShapeError(
            "verify_invariance",
            f"{original.in_features}->{original.out_features}",
            f"{adapted.in_features}->{adapted.out_features}",
        )
    channels = original.in_features
    x = SplitMix64(seed).gaussian(trials * channels * spatial_size * spatial_size)
    x = x.reshape(trials, channels, spatial_size, spatial_size)

    modes = (original.training, adapted.training)
    original.eval()
    adapted.eval()
    try:
        with no_grad(), double_precision():
            x = Tensor(x)
            expected = original(global_avg_pool(x)).data.astype(np.float64)
            got = global_avg_pool(adapted(x)).data.astype(np.float64)
    finally:
        original.train(modes[0])
        adapted.train(modes[1])

    dev = float(np.max(np.abs(expected - got)))
    report = InvarianceReport(dev, tol, trials, spatial_size, dev <= tol)
    logger.debug(f"invariance check: max deviation {dev:.3e} over {trials} trials")
    return report
