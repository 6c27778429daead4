#!/usr/bin/env python3
"""Synthetic image store, augmentation policy and two-view sampling."""

import logging
from dataclasses import dataclass, field
from typing import Any, Dict, List, Sequence, Tuple

import numpy as np

from ..exceptions import DatasetError, ValidationError
from ..nn.functional import resize_array
from ..rng import RngStreams, SplitMix64

logger = logging.getLogger("pcdlib")

SHAPE_KINDS = ("rectangle", "circle", "triangle")
MIN_IMAGE_SIZE = 16


@dataclass
class ImageStore:
    """RGB images ``[n, 3, size, size]`` in [0, 1] plus per-image layout metadata."""

    images: np.ndarray
    metadata: List[Dict[str, Any]] = field(default_factory=list)
    seed: int = 0

    def __len__(self) -> int:
        return int(self.images.shape[0])

    @property
    def size(self) -> int:
        return int(self.images.shape[-1])

    def require_nonempty(self) -> None:
        if len(self) == 0:
            raise DatasetError("image store is empty; generate data with gen-data --n > 0")


# ---------------------------------------------------------------- synthesis


def _background(rng: SplitMix64, size: int) -> np.ndarray:
    coarse = rng.gaussian(3 * 4 * 4).reshape(3, 4, 4)
    return np.clip(0.5 + 0.15 * resize_array(coarse, size, size), 0.0, 1.0)


def _shape_mask(kind: str, rng: SplitMix64, size: int) -> Tuple[np.ndarray, List[int]]:
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    extent = rng.integers(size // 6, size // 2 + 1, 2)
    y0, x0 = rng.integers(0, size - int(extent[0]) + 1, 1)[0], rng.integers(0, size - int(extent[1]) + 1, 1)[0]
    y1, x1 = y0 + int(extent[0]), x0 + int(extent[1])
    if kind == "rectangle":
        mask = (yy >= y0) & (yy < y1) & (xx >= x0) & (xx < x1)
    elif kind == "circle":
        cy, cx = (y0 + y1 - 1) / 2.0, (x0 + x1 - 1) / 2.0
        r = min(extent) / 2.0
        mask = (yy - cy) ** 2 + (xx - cx) ** 2 <= r * r
    else:
        # apex on the top edge, base on the bottom edge of the box
        apex = x0 + rng.uniform(1)[0] * (x1 - x0)
        t = np.clip((yy - y0) / max(y1 - y0, 1), 0.0, 1.0)
        left = apex + (x0 - apex) * t
        right = apex + (x1 - apex) * t
        mask = (yy >= y0) & (yy < y1) & (xx >= left) & (xx <= right)
    return mask, [int(y0), int(x0), int(y1), int(x1)]


def synth_image(rng: SplitMix64, size: int) -> Tuple[np.ndarray, Dict[str, Any]]:
    image = _background(rng, size)
    shapes = []
    for _ in range(int(rng.integers(2, 6, 1)[0])):
        kind = SHAPE_KINDS[int(rng.integers(0, len(SHAPE_KINDS), 1)[0])]
        color = rng.uniform(3)
        mask, bbox = _shape_mask(kind, rng, size)
        image[:, mask] = color[:, None]
        shapes.append({"kind": kind, "bbox": bbox, "color": [round(float(c), 6) for c in color]})
    return np.clip(image, 0.0, 1.0).astype(np.float32), {"shapes": shapes}


def synth_dataset(n: int, size: int, seed: int) -> ImageStore:
    """Procedural RGB images: 2-5 colored shapes on low-frequency noise.

    Image ``i`` depends only on ``(seed, i, size)``.
    """
    if size < MIN_IMAGE_SIZE:
        raise ValidationError(f"image size must be >= {MIN_IMAGE_SIZE}", field="size", value=size)
    if n < 0:
        raise ValidationError("image count must be >= 0", field="n", value=n)
    streams = RngStreams(seed)
    images = np.zeros((n, 3, size, size), dtype=np.float32)
    metadata = []
    for i in range(n):
        images[i], meta = synth_image(streams.derive("image", i), size)
        metadata.append(meta)
    logger.debug(f"generated {n} synthetic images of {size}x{size} (seed {seed})")
    return ImageStore(images, metadata, seed)


# ------------------------------------------------------------- augmentation


@dataclass
class ViewDistribution:
    """One augmentation distribution.

    Attributes:
        crop_scale: range of the crop area as a fraction of the image
        flip_prob: probability of a horizontal flip
        brightness: range of the multiplicative brightness factor
    """

    crop_scale: List[float] = field(default_factory=lambda: [0.5, 1.0])
    flip_prob: float = 0.5
    brightness: List[float] = field(default_factory=lambda: [0.8, 1.2])

    def validate(self) -> None:
        for name in ("crop_scale", "brightness"):
            if len(getattr(self, name)) != 2:
                raise ValidationError("must be a [low, high] pair", field=name, value=getattr(self, name))
        lo, hi = self.crop_scale
        if not 0 < lo <= hi:
            raise ValidationError("must satisfy 0 < low <= high", field="crop_scale", value=self.crop_scale)
        if not 0 <= self.flip_prob <= 1:
            raise ValidationError("must lie in [0, 1]", field="flip_prob", value=self.flip_prob)
        lo, hi = self.brightness
        if not 0 <= lo <= hi:
            raise ValidationError("must satisfy 0 <= low <= high", field="brightness", value=self.brightness)


@dataclass
class AugmentPolicy:
    """Two view distributions; ``view_b`` is the stronger one."""

    view_a: ViewDistribution = field(default_factory=ViewDistribution)
    view_b: ViewDistribution = field(
        default_factory=lambda: ViewDistribution([0.3, 1.0], 0.5, [0.6, 1.4])
    )

    def validate(self) -> None:
        self.view_a.validate()
        self.view_b.validate()


def hflip(img: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(img[..., ::-1])


def augment_view(img: np.ndarray, dist: ViewDistribution, rng: SplitMix64, out_size: int) -> np.ndarray:
    """Random crop (clamped to the image), resize to ``out_size``, flip, brightness.

    Every draw happens unconditionally so the stream position never depends
    on the outcome of earlier draws.
    """
    size = img.shape[-1]
    scale = rng.between(dist.crop_scale)
    side = int(min(max(round(size * np.sqrt(scale)), 1), size))
    y = int(rng.integers(0, size - side + 1, 1)[0])
    x = int(rng.integers(0, size - side + 1, 1)[0])
    flip = rng.bernoulli(dist.flip_prob)
    factor = rng.between(dist.brightness)

    view = img[:, y:y + side, x:x + side]
    if side != out_size:
        view = resize_array(view, out_size, out_size)
    if flip:
        view = hflip(view)
    if factor != 1.0:
        view = view * factor
    return np.clip(view, 0.0, 1.0).astype(np.float32)


def two_view(
    img: np.ndarray,
    policy: AugmentPolicy,
    rng: SplitMix64,
    out_size: int = None,
) -> Tuple[np.ndarray, np.ndarray]:
    """View A from ``policy.view_a`` then view B from ``policy.view_b``, both ``out_size``."""
    out_size = out_size or img.shape[-1]
    return (
        augment_view(img, policy.view_a, rng, out_size),
        augment_view(img, policy.view_b, rng, out_size),
    )


def view_batch(
    store: ImageStore,
    indices: Sequence[int],
    policy: AugmentPolicy,
    streams: RngStreams,
    step: int,
    out_size: int = None,
) -> Tuple[np.ndarray, np.ndarray]:
    """Stacked view pairs for ``indices``; image ``i`` at ``step`` uses stream ``(augment, step, i)``."""
    pairs = [two_view(store.images[i], policy, streams.derive("augment", step, int(i)), out_size) for i in indices]
    return np.stack([a for a, _ in pairs]), np.stack([b for _, b in pairs])


def epoch_order(n: int, epoch: int, streams: RngStreams) -> np.ndarray:
    return streams.derive("shuffle", epoch).permutation(n)
