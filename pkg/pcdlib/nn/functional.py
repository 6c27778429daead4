#!/usr/bin/env python3
"""Differentiable layer primitives.

Each function checks its shapes, then records one primitive on the tape via
:func:`pcdlib.tensor.apply` with an explicit backward rule. Convolutions and
normalizations accumulate in float64.
"""

import math
from typing import Optional, Tuple

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from ..exceptions import ShapeError, ValidationError, format_shape
from ..tensor import Tensor, apply, bmm, reduce, relu, reshape, scale, softmax, transpose

__all__ = [
    "batchnorm_inference",
    "batchnorm_train",
    "bilinear_matrix",
    "bilinear_resize",
    "conv2d",
    "cw_relu",
    "global_avg_pool",
    "l2_normalize",
    "linear",
    "mhsa",
    "relu",
    "resize_array",
]


def _require_ndim(op: str, x: Tensor, ndim: int) -> None:
    if x.ndim != ndim:
        raise ShapeError(op, f"{ndim}-D input", format_shape(x.shape))


# ------------------------------------------------------------- convolution


def conv_output_size(size: int, kernel: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - kernel) // stride + 1


def conv2d(
    x: Tensor,
    kernel: Tensor,
    bias: Optional[Tensor] = None,
    stride: int = 1,
    padding: int = 0,
) -> Tensor:
    """2-D cross-correlation of ``x[N, C_in, H, W]`` with ``kernel[C_out, C_in, kh, kw]``."""
    _require_ndim("conv2d", x, 4)
    _require_ndim("conv2d", kernel, 4)
    n, c_in, h, w = x.shape
    c_out, k_in, kh, kw = kernel.shape
    if c_in != k_in:
        raise ShapeError("conv2d", message=f"conv2d: input has {c_in} channels, kernel expects {k_in}")
    if stride < 1 or padding < 0:
        raise ValidationError("conv2d: stride must be >= 1 and padding >= 0")
    if kh > h + 2 * padding or kw > w + 2 * padding:
        raise ShapeError(
            "conv2d",
            message=f"conv2d: kernel {kh}x{kw} larger than padded input {h + 2 * padding}x{w + 2 * padding}",
        )
    if bias is not None and bias.shape != (c_out,):
        raise ShapeError("conv2d", f"bias [{c_out}]", format_shape(bias.shape))
    h_out = conv_output_size(h, kh, stride, padding)
    w_out = conv_output_size(w, kw, stride, padding)

    def windows(v: np.ndarray) -> np.ndarray:
        vp = np.pad(v.astype(np.float64), ((0, 0), (0, 0), (padding, padding), (padding, padding)))
        win = sliding_window_view(vp, (kh, kw), axis=(2, 3))
        return win[:, :, ::stride, ::stride][:, :, :h_out, :w_out]

    def forward(v: np.ndarray, k: np.ndarray, b: Optional[np.ndarray] = None) -> np.ndarray:
        out = np.tensordot(windows(v), k.astype(np.float64), axes=([1, 4, 5], [1, 2, 3]))
        out = np.transpose(out, (0, 3, 1, 2))
        if b is not None:
            out = out + b.astype(np.float64)[None, :, None, None]
        return out

    def backward(g, out, v, k, b=None):
        dk = np.tensordot(g, windows(v), axes=([0, 2, 3], [0, 2, 3]))
        dx = np.zeros((n, c_in, h + 2 * padding, w + 2 * padding), dtype=np.float64)
        k64 = k.astype(np.float64)
        for i in range(kh):
            for j in range(kw):
                dx[:, :, i : i + stride * (h_out - 1) + 1 : stride, j : j + stride * (w_out - 1) + 1 : stride] += (
                    np.einsum("nohw,oc->nchw", g, k64[:, :, i, j])
                )
        dx = dx[:, :, padding : padding + h, padding : padding + w]
        if b is None:
            return dx, dk
        return dx, dk, g.sum(axis=(0, 2, 3))

    inputs = (x, kernel) if bias is None else (x, kernel, bias)
    return apply("conv2d", inputs, forward, backward)


def linear(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """Fully connected layer: ``x[N, in] @ weight[out, in]^T + bias``."""
    _require_ndim("linear", x, 2)
    if x.shape[1] != weight.shape[1]:
        raise ShapeError("linear", message=f"linear: input has {x.shape[1]} features, weight expects {weight.shape[1]}")

    def forward(v, wt, b=None):
        out = v.astype(np.float64) @ wt.astype(np.float64).T
        return out if b is None else out + b.astype(np.float64)

    def backward(g, out, v, wt, b=None):
        dx = g @ wt.astype(np.float64)
        dw = g.T @ v.astype(np.float64)
        if b is None:
            return dx, dw
        return dx, dw, g.sum(axis=0)

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return apply("linear", inputs, forward, backward)


# ----------------------------------------------------------- normalization


def _bn_layout(x: Tensor, channels: int, layout: str) -> Tuple[Tuple[int, ...], Tuple[int, ...]]:
    if layout == "vector":
        _require_ndim("batchnorm", x, 2)
        axes, bshape = (0,), (1, channels)
    elif layout == "map":
        _require_ndim("batchnorm", x, 4)
        axes, bshape = (0, 2, 3), (1, channels, 1, 1)
    else:
        raise ValidationError(f"unknown batchnorm layout '{layout}'", field="layout", value=layout)
    if x.shape[1] != channels:
        raise ShapeError("batchnorm", message=f"batchnorm: input has {x.shape[1]} channels, expected {channels}")
    return axes, bshape


def batchnorm_train(
    x: Tensor,
    gamma: Optional[Tensor],
    beta: Optional[Tensor],
    eps: float,
    layout: str = "map",
) -> Tuple[Tensor, np.ndarray, np.ndarray]:
    """Batch-statistics normalization over every non-channel axis.

    Returns the output together with the batch mean and the biased batch
    variance so the caller can update running statistics.
    """
    channels = x.shape[1] if x.ndim >= 2 else 0
    axes, bshape = _bn_layout(x, channels, layout)
    count = int(np.prod([x.shape[a] for a in axes]))
    affine = gamma is not None

    def stats(v: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        v = v.astype(np.float64)
        mean = v.mean(axis=axes, keepdims=True)
        var = ((v - mean) ** 2).mean(axis=axes, keepdims=True)
        return mean, var

    def forward(v, g=None, b=None):
        mean, var = stats(v)
        xhat = (v.astype(np.float64) - mean) / np.sqrt(var + eps)
        if not affine:
            return xhat
        return xhat * g.astype(np.float64).reshape(bshape) + b.astype(np.float64).reshape(bshape)

    def backward(gy, out, v, g=None, b=None):
        mean, var = stats(v)
        inv = 1.0 / np.sqrt(var + eps)
        xhat = (v.astype(np.float64) - mean) * inv
        gx = gy * g.astype(np.float64).reshape(bshape) if affine else gy
        dx = (inv / count) * (
            count * gx - gx.sum(axis=axes, keepdims=True) - xhat * (gx * xhat).sum(axis=axes, keepdims=True)
        )
        if not affine:
            return (dx,)
        return dx, (gy * xhat).sum(axis=axes), gy.sum(axis=axes)

    inputs = (x, gamma, beta) if affine else (x,)
    out = apply("batchnorm_train", inputs, forward, backward)
    mean, var = stats(x.data)
    return out, mean.reshape(channels), var.reshape(channels)


def batchnorm_inference(
    x: Tensor,
    gamma: Optional[Tensor],
    beta: Optional[Tensor],
    running_mean: np.ndarray,
    running_var: np.ndarray,
    eps: float,
    layout: str = "map",
) -> Tensor:
    """Per-channel affine ``gamma * (x - mean) / sqrt(var + eps) + beta``."""
    channels = running_mean.shape[0]
    axes, bshape = _bn_layout(x, channels, layout)
    affine = gamma is not None
    mean = np.array(running_mean, dtype=np.float64).reshape(bshape)
    inv = 1.0 / np.sqrt(np.array(running_var, dtype=np.float64).reshape(bshape) + eps)

    def forward(v, g=None, b=None):
        xhat = (v.astype(np.float64) - mean) * inv
        if not affine:
            return xhat
        return xhat * g.astype(np.float64).reshape(bshape) + b.astype(np.float64).reshape(bshape)

    def backward(gy, out, v, g=None, b=None):
        if not affine:
            return (gy * inv,)
        xhat = (v.astype(np.float64) - mean) * inv
        return gy * inv * g.astype(np.float64).reshape(bshape), (gy * xhat).sum(axis=axes), gy.sum(axis=axes)

    inputs = (x, gamma, beta) if affine else (x,)
    return apply("batchnorm_inference", inputs, forward, backward)


# ------------------------------------------------------------- activations


def cw_relu(x: Tensor) -> Tensor:
    """Channel-wise ReLU: zero every (sample, channel) map whose spatial mean is negative.

    Kept channels pass through unchanged, negative pixels included, so that
    ``relu(global_avg_pool(x)) == global_avg_pool(cw_relu(x))``.
    """
    _require_ndim("cw_relu", x, 4)

    def mask(v: np.ndarray) -> np.ndarray:
        return v.mean(axis=(2, 3), dtype=np.float64, keepdims=True) >= 0

    return apply("cw_relu", (x,), lambda v: v * mask(v), lambda g, out, v: (g * mask(v),))


def l2_normalize(v: Tensor, axis: int = 1, eps: float = 1e-12) -> Tensor:
    """Scale ``v`` to unit l2 norm along ``axis``; norms below ``eps`` divide by ``eps``."""

    def norm(a: np.ndarray) -> np.ndarray:
        return np.sqrt(np.sum(a.astype(np.float64) ** 2, axis=axis, keepdims=True))

    def forward(a):
        return a.astype(np.float64) / np.maximum(norm(a), eps)

    def backward(g, out, a):
        n = norm(a)
        denom = np.maximum(n, eps)
        y = a.astype(np.float64) / denom
        projected = (g - y * np.sum(g * y, axis=axis, keepdims=True)) / denom
        return (np.where(n > eps, projected, g / eps),)

    return apply("l2_normalize", (v,), forward, backward)


# ------------------------------------------------------------------ resize


def bilinear_matrix(src: int, dst: int) -> np.ndarray:
    """Interpolation matrix ``[dst, src]`` with half-pixel centers and edge clamping."""
    m = np.zeros((dst, src), dtype=np.float64)
    ratio = src / dst
    for d in range(dst):
        s = min(max((d + 0.5) * ratio - 0.5, 0.0), src - 1.0)
        i0 = int(math.floor(s))
        i1 = min(i0 + 1, src - 1)
        frac = s - i0
        m[d, i0] += 1.0 - frac
        m[d, i1] += frac
    return m


def resize_array(a: np.ndarray, height: int, width: int) -> np.ndarray:
    """Bilinear resize of the last two axes of a plain array (no tape)."""
    ah = bilinear_matrix(a.shape[-2], height)
    aw = bilinear_matrix(a.shape[-1], width)
    return np.einsum("ih,...hw,jw->...ij", ah, a.astype(np.float64), aw)


def bilinear_resize(t: Tensor, height: int, width: int) -> Tensor:
    """Differentiable bilinear resize of ``t[N, C, H, W]`` to ``[N, C, height, width]``."""
    _require_ndim("bilinear_resize", t, 4)
    if height < 1 or width < 1:
        raise ValidationError(
            f"bilinear_resize: target size {height}x{width} is degenerate", field="size"
        )
    ah = bilinear_matrix(t.shape[2], height)
    aw = bilinear_matrix(t.shape[3], width)
    return apply(
        "bilinear_resize",
        (t,),
        lambda v: np.einsum("ih,nchw,jw->ncij", ah, v.astype(np.float64), aw),
        lambda g, out, v: (np.einsum("ih,ncij,jw->nchw", ah, g, aw),),
    )


# ----------------------------------------------------------------- pooling


def global_avg_pool(x: Tensor) -> Tensor:
    """Spatial mean per channel: ``[N, C, H, W] -> [N, C]``."""
    _require_ndim("global_avg_pool", x, 4)
    return reduce("mean", x, (2, 3))


# --------------------------------------------------------------- attention


def _heads(t: Tensor, n: int, heads: int, head_dim: int, length: int) -> Tensor:
    # [N, heads*head_dim, H, W] -> [N, heads, head_dim, L]
    return reshape(t, (n, heads, head_dim, length))


def mhsa_attention(x: Tensor, p) -> Tuple[Tensor, Tensor]:
    """Attention weights ``[N, heads, L, L]`` and per-head outputs ``[N, heads, L, head_dim]``."""
    _require_ndim("mhsa", x, 4)
    n, c, h, w = x.shape
    if c != p.channels:
        raise ShapeError("mhsa", message=f"mhsa: input has {c} channels, module expects {p.channels}")
    length = h * w
    q = transpose(_heads(conv2d(x, p.q.kernel, p.q.bias), n, p.heads, p.head_dim, length), (0, 1, 3, 2))
    k = _heads(conv2d(x, p.k.kernel, p.k.bias), n, p.heads, p.head_dim, length)
    v = transpose(_heads(conv2d(x, p.v.kernel, p.v.bias), n, p.heads, p.head_dim, length), (0, 1, 3, 2))
    scores = scale(bmm(q, k), 1.0 / math.sqrt(p.head_dim))
    attention = softmax(scores, axis=-1)
    return attention, bmm(attention, v)


def mhsa(x: Tensor, p) -> Tensor:
    """Multi-head self-attention over the spatial positions of ``x[N, C, H, W]``.

    Queries, keys and values come from 1x1 convolutions; each head attends
    over all ``H*W`` positions; heads are concatenated and projected back to
    ``C`` channels by the output 1x1 convolution. No positional encoding.
    """
    n, _, h, w = x.shape
    _, values = mhsa_attention(x, p)
    merged = reshape(transpose(values, (0, 1, 3, 2)), (n, p.heads * p.head_dim, h, w))
    return conv2d(merged, p.out.kernel, p.out.bias)
