#!/usr/bin/env python3
"""Effective receptive field probing.

The ERF of a model is the mean absolute input gradient obtained by setting
the upstream gradient to one on every channel of the center output pixel,
over Gaussian noise inputs, normalized so the largest value is 1.
"""

import logging
from dataclasses import dataclass
from typing import List, Optional, Tuple

import numpy as np

from .exceptions import ShapeError, ValidationError
from .modelzoo import Student
from .nn import Conv2d, Module, MultiHeadSelfAttention, ReLU, Sequential
from .rng import RngStreams, SplitMix64
from .tensor import Tensor, backward, getitem, reduce

logger = logging.getLogger("pcdlib")

FORMATS = ("pgm", "csv")
TOY_MODELS = ("shallow", "deep", "mhsa")


@dataclass
class ErfMap:
    """Normalized ERF over the input plane.

    Attributes:
        values: ``[H, W]`` non-negative map, max 1 unless degenerate
        center: probed output coordinate ``(row, col)``
        degenerate: True when every input gradient was zero
        samples: number of noise inputs averaged
    """

    values: np.ndarray
    center: Tuple[int, int]
    degenerate: bool = False
    samples: int = 0

    @property
    def shape(self) -> Tuple[int, int]:
        return self.values.shape

    def corners(self) -> List[float]:
        v = self.values
        return [float(v[0, 0]), float(v[0, -1]), float(v[-1, 0]), float(v[-1, -1])]


def compute_erf(
    model: Module,
    input_size: int,
    n_samples: int = 64,
    seed: int = 0,
    in_channels: Optional[int] = None,
) -> ErfMap:
    """Probe ``model`` (a map-to-map module) with ``n_samples`` Gaussian inputs.

    The center output pixel is ``((H - 1) // 2, (W - 1) // 2)``, so even
    sizes tie to the lower index. The model runs in inference mode; its
    previous mode is restored afterwards.
    """
    if n_samples < 1:
        raise ValidationError("n_samples must be >= 1", field="n_samples", value=n_samples)
    channels = in_channels or getattr(model, "in_channels", 3)
    streams = RngStreams(seed)
    was_training = model.training
    model.eval()
    total = np.zeros((input_size, input_size), dtype=np.float64)
    center = (0, 0)
    try:
        for i in range(n_samples):
            noise = streams.derive("erf", i).gaussian(channels * input_size * input_size)
            x = Tensor(noise.reshape(1, channels, input_size, input_size), requires_grad=True)
            out = model(x)
            if out.ndim != 4 or out.shape[2] < 1 or out.shape[3] < 1:
                raise ShapeError("compute_erf", "a [N, C, H, W] output map", out.shape)
            center = ((out.shape[2] - 1) // 2, (out.shape[3] - 1) // 2)
            target = reduce("sum", getitem(out, (0, slice(None), center[0], center[1])))
            backward(target)
            total += np.abs(x.grad.astype(np.float64)).sum(axis=(0, 1))
    finally:
        model.zero_grad()
        model.train(was_training)

    total /= n_samples
    peak = float(total.max())
    if peak == 0.0:
        logger.warning("ERF probe produced an all-zero map")
        return ErfMap(np.zeros_like(total), center, True, n_samples)
    return ErfMap(total / peak, center, False, n_samples)


def _support_center(values: np.ndarray) -> Tuple[int, int]:
    rows = np.flatnonzero(values.any(axis=1))
    cols = np.flatnonzero(values.any(axis=0))
    return (int(rows[0] + rows[-1]) // 2, int(cols[0] + cols[-1]) // 2)


def erf_radius(m: ErfMap, mass: float = 0.95) -> int:
    """Smallest ``r`` whose ``(2r+1)^2`` window holds at least ``mass`` of the map.

    The window is centered on the midpoint of the map's support and clipped
    to the map.
    """
    if m.degenerate:
        raise ValidationError("cannot measure the radius of a degenerate ERF map", field="erf")
    if not 0 < mass <= 1:
        raise ValidationError("mass must lie in (0, 1]", field="mass", value=mass)
    values = np.asarray(m.values, dtype=np.float64)
    total = values.sum()
    cy, cx = _support_center(values)
    h, w = values.shape
    for r in range(max(h, w) + 1):
        window = values[max(cy - r, 0):cy + r + 1, max(cx - r, 0):cx + r + 1]
        if window.sum() >= mass * total * (1 - 1e-12):
            return r
    return max(h, w)


def receptive_field(layers: Sequential) -> int:
    """Theoretical receptive field size of a chain of convolutions."""
    size, jump = 1, 1
    for layer in layers:
        if isinstance(layer, Conv2d):
            size += (layer.kernel_size - 1) * jump
            jump *= layer.stride
    return size


# --------------------------------------------------------------------- io


def write_heatmap(m: ErfMap, path: str, fmt: str = "pgm") -> None:
    """Write ``m`` as binary PGM (P5, 8-bit) or CSV (6 significant digits)."""
    if fmt not in FORMATS:
        raise ValidationError(f"unknown heatmap format '{fmt}'", field="format", value=fmt)
    values = np.asarray(m.values, dtype=np.float64)
    h, w = values.shape
    try:
        if fmt == "pgm":
            pixels = np.floor(np.clip(values, 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)
            with open(path, "wb") as f:
                f.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
                f.write(pixels.tobytes(order="C"))
        else:
            np.savetxt(path, values, fmt="%.6g", delimiter=",")
    except OSError as e:
        raise ValidationError(f"cannot write heatmap {path}: {e.strerror or e}", field="out") from e
    logger.debug(f"wrote {h}x{w} {fmt} heatmap to {path}")


def read_heatmap_csv(path: str) -> np.ndarray:
    return np.atleast_2d(np.loadtxt(path, delimiter=",", dtype=np.float64))


# ----------------------------------------------------------------- models


class StudentOutput(Module):
    """Student backbone + head (+ enhancer) as a single map-to-map module."""

    def __init__(self, student: Student) -> None:
        super().__init__()
        self.student = student
        self.in_channels = student.spec.backbone.in_channels

    def forward(self, x: Tensor) -> Tensor:
        return self.student(x)[1]


class ToyNet(Sequential):
    """Stride-1 3x3 convolution stack used to compare ERFs."""

    def __init__(self, *layers: Module, in_channels: int = 3) -> None:
        super().__init__(*layers)
        self.in_channels = in_channels


def toy_model(name: str, seed: int = 0, channels: int = 8) -> ToyNet:
    """``shallow`` (3 convs), ``deep`` (6 convs) or ``mhsa`` (3 convs + attention)."""
    if name not in TOY_MODELS:
        raise ValidationError(f"unknown toy model '{name}', choose from {', '.join(TOY_MODELS)}", field="model")
    rng = SplitMix64(seed)
    depth = 6 if name == "deep" else 3
    layers: List[Module] = []
    c_in = 3
    for i in range(depth):
        layers.append(Conv2d(c_in, channels, 3, 1, 1, rng=rng))
        if i < depth - 1:
            layers.append(ReLU())
        c_in = channels
    if name == "mhsa":
        layers.append(MultiHeadSelfAttention(channels, heads=2, head_dim=4, rng=rng))
    return ToyNet(*layers, in_channels=3)
