#!/usr/bin/env python3
"""Contrastive distillation losses and the negative-sample memory queue.

The pixel-level loss treats every output pixel of the student as a query:
its positive key is the teacher pixel at the same position (same view), and
its negatives are the pooled, l2-normalized teacher features stored in the
:class:`MemoryQueue`. The image-level loss pools both maps first and applies
the same InfoNCE term once per sample.
"""

import logging
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Union

import numpy as np

from .exceptions import DomainError, ShapeError, ValidationError, format_shape
from .nn.functional import global_avg_pool, l2_normalize, resize_array
from .rng import SplitMix64
from .tensor import Tensor, backward, concat, constant, logsumexp, matmul, reduce, reshape, scale, sub, transpose

logger = logging.getLogger("pcdlib")

LEVELS = ("pixel", "image")
ENQUEUE_MODES = ("both", "one")


def normalize_rows(v: np.ndarray) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    return v / np.maximum(np.linalg.norm(v, axis=1, keepdims=True), 1e-12)


def _array(x: Union[Tensor, np.ndarray], dtype=None) -> np.ndarray:
    return np.asarray(x.data if isinstance(x, Tensor) else x, dtype=dtype)


@dataclass
class LossConfig:
    """Loss settings.

    Attributes:
        tau: softmax temperature (> 0)
        symmetric: average the loss over both views instead of using one
        level: ``pixel`` (per-pixel InfoNCE) or ``image`` (pooled InfoNCE)
        enqueue: ``both`` views' teacher keys are pushed, or only ``one``
        queue_capacity: number of negatives kept in the queue
    """

    tau: float = 0.2
    symmetric: bool = True
    level: str = "pixel"
    enqueue: str = "both"
    queue_capacity: int = 4096

    def validate(self) -> None:
        if self.tau <= 0:
            raise ValidationError(f"tau must be positive, got {self.tau}", field="tau", value=self.tau)
        if self.level not in LEVELS:
            raise ValidationError(f"level must be one of {', '.join(LEVELS)}", field="level", value=self.level)
        if self.enqueue not in ENQUEUE_MODES:
            raise ValidationError(
                f"enqueue must be one of {', '.join(ENQUEUE_MODES)}", field="enqueue", value=self.enqueue
            )
        if self.queue_capacity < 1:
            raise ValidationError("queue_capacity must be >= 1", field="queue_capacity", value=self.queue_capacity)


class MemoryQueue:
    """FIFO ring buffer of unit-norm negative keys.

    The queue is owned by the training loop. Losses read a
    :meth:`snapshot`; keys are pushed only after the backward pass.
    """

    def __init__(self, capacity: int, dim: int) -> None:
        if capacity < 1 or dim < 1:
            raise ValidationError("queue capacity and dim must be >= 1")
        self.capacity = capacity
        self.dim = dim
        self._buffer = np.zeros((capacity, dim), dtype=np.float32)
        self._head = 0
        self._count = 0

    def __len__(self) -> int:
        return self._count

    @property
    def pushed(self) -> int:
        return self._count

    def push(self, keys: Union[Tensor, np.ndarray]) -> None:
        """Append keys; a ``[N, C, H, W]`` map is pooled first. Oldest keys are evicted."""
        data = keys.data if isinstance(keys, Tensor) else np.asarray(keys)
        if data.ndim == 4:
            data = data.astype(np.float64).mean(axis=(2, 3))
        if data.ndim != 2 or data.shape[1] != self.dim:
            raise ShapeError("queue_push", f"[N, {self.dim}] keys", format_shape(data.shape))
        data = normalize_rows(data).astype(np.float32)
        if data.shape[0] > self.capacity:
            data = data[-self.capacity:]
        for row in data:
            self._buffer[self._head] = row
            self._head = (self._head + 1) % self.capacity
        self._count = min(self._count + data.shape[0], self.capacity)

    def snapshot(self) -> np.ndarray:
        """Stored keys in insertion order (oldest first), as a copy."""
        if self._count < self.capacity:
            return self._buffer[: self._count].copy()
        return np.concatenate([self._buffer[self._head:], self._buffer[: self._head]], axis=0)

    def load(self, keys: np.ndarray) -> None:
        """Replace the content with ``keys`` (oldest first), e.g. from a checkpoint."""
        self._buffer[:] = 0
        self._head = 0
        self._count = 0
        keys = np.asarray(keys, dtype=np.float32).reshape(-1, self.dim)[-self.capacity:]
        # stored verbatim: keys were normalized when first pushed
        n = keys.shape[0]
        self._buffer[:n] = keys
        self._head = n % self.capacity
        self._count = n


def _negatives(queue: Union[MemoryQueue, np.ndarray, Sequence, None], dim: int) -> np.ndarray:
    if queue is None:
        return np.zeros((0, dim))
    if isinstance(queue, MemoryQueue):
        negs = queue.snapshot()
    elif isinstance(queue, (list, tuple)):
        negs = np.asarray([_array(n) for n in queue])
    else:
        negs = np.asarray(queue)
    if negs.size == 0:
        return np.zeros((0, dim))
    if negs.ndim != 2 or negs.shape[1] != dim:
        raise ShapeError("contrastive_loss", f"[K, {dim}] negatives", format_shape(negs.shape))
    return negs.astype(np.float64)


def _check_tau(tau: float) -> None:
    if tau <= 0:
        raise DomainError(f"tau must be positive, got {tau}")


def contrastive_loss(queries: Tensor, keys: np.ndarray, negatives: np.ndarray, tau: float) -> Tensor:
    """Mean InfoNCE over rows: ``queries[M, D]`` against positive ``keys[M, D]`` and shared negatives.

    Per row: ``logsumexp([q.k, q.n_1, ..., q.n_K] / tau) - q.k / tau``.
    Keys and negatives are constants; only ``queries`` receives gradient.
    """
    _check_tau(tau)
    m, d = queries.shape
    keys = constant(np.asarray(keys, dtype=np.float64).reshape(m, d))
    positive = reduce("sum", queries * keys, axes=1, keepdims=True)
    logits = positive
    if negatives.shape[0]:
        logits = concat([positive, matmul(queries, constant(negatives.T))], axis=1)
    logits = scale(logits, 1.0 / tau)
    per_row = sub(logsumexp(logits, axis=1), scale(reshape(positive, (m,)), 1.0 / tau))
    return reduce("mean", per_row)


def pixel_infonce(
    s_star_i: Tensor,
    t_i: Union[Tensor, np.ndarray],
    negs: Union[np.ndarray, Sequence, None],
    tau: float,
) -> Tensor:
    """InfoNCE for one unit-norm query ``s_star_i[D]`` and its positive ``t_i[D]``."""
    d = s_star_i.shape[0]
    key = _array(t_i).reshape(1, d)
    return contrastive_loss(reshape(s_star_i, (1, d)), key, _negatives(negs, d), tau)


def _teacher_pixels(t: Union[Tensor, np.ndarray], height: int, width: int) -> np.ndarray:
    data = _array(t, dtype=np.float64)
    if data.shape[2:] != (height, width):
        logger.debug(f"resizing teacher map {data.shape[2]}x{data.shape[3]} -> {height}x{width}")
        data = resize_array(data, height, width)
    return data


def _check_channels(s_star: Tensor, t) -> None:
    t_shape = np.shape(_array(t))
    if s_star.ndim != 4 or len(t_shape) != 4 or s_star.shape[:2] != tuple(t_shape[:2]):
        raise ShapeError(
            "pcd_loss",
            message=f"pcd_loss: student output {format_shape(s_star.shape)} does not match teacher {format_shape(t_shape)}",
        )


def pcd_loss(
    s_star: Tensor,
    t: Union[Tensor, np.ndarray],
    queue: Union[MemoryQueue, np.ndarray, None],
    cfg: LossConfig,
) -> Tensor:
    """Pixel-wise contrastive loss averaged over samples and pixels.

    ``t`` is resized bilinearly to the student's spatial size when they differ;
    both sides are l2-normalized per pixel and the teacher side is constant.
    """
    _check_tau(cfg.tau)
    _check_channels(s_star, t)
    n, d, h, w = s_star.shape
    teacher = _teacher_pixels(t, h, w)
    keys = normalize_rows(np.transpose(teacher, (0, 2, 3, 1)).reshape(n * h * w, d))
    queries = reshape(transpose(l2_normalize(s_star, axis=1), (0, 2, 3, 1)), (n * h * w, d))
    return contrastive_loss(queries, keys, _negatives(queue, d), cfg.tau)


def image_level_loss(
    s_star: Tensor,
    t: Union[Tensor, np.ndarray],
    queue: Union[MemoryQueue, np.ndarray, None],
    cfg: LossConfig,
) -> Tensor:
    """InfoNCE on globally pooled features, one term per sample.

    ``s_star`` may be a ``[N, D, H, W]`` map (pooled here) or already pooled ``[N, D]``.
    """
    _check_tau(cfg.tau)
    pooled = global_avg_pool(s_star) if s_star.ndim == 4 else s_star
    t_data = _array(t, dtype=np.float64)
    t_pooled = t_data.mean(axis=(2, 3)) if t_data.ndim == 4 else t_data
    if pooled.ndim != 2 or t_pooled.shape != pooled.shape:
        raise ShapeError("image_level_loss", format_shape(pooled.shape), format_shape(t_pooled.shape))
    d = pooled.shape[1]
    return contrastive_loss(l2_normalize(pooled, axis=1), normalize_rows(t_pooled), _negatives(queue, d), cfg.tau)


def distillation_loss(s_star: Tensor, t, queue, cfg: LossConfig) -> Tensor:
    if cfg.level == "pixel":
        return pcd_loss(s_star, t, queue, cfg)
    if cfg.level == "image":
        return image_level_loss(s_star, t, queue, cfg)
    raise ValidationError(f"unknown loss level '{cfg.level}'", field="level", value=cfg.level)


def pixel_cosine(s_star: Union[Tensor, np.ndarray], t: Union[Tensor, np.ndarray]) -> float:
    """Mean per-pixel cosine similarity between student output and teacher map."""
    s = _array(s_star, dtype=np.float64)
    n, d, h, w = s.shape
    teacher = _teacher_pixels(t, h, w)
    a = normalize_rows(np.transpose(s, (0, 2, 3, 1)).reshape(-1, d))
    b = normalize_rows(np.transpose(teacher, (0, 2, 3, 1)).reshape(-1, d))
    return float(np.mean(np.sum(a * b, axis=1)))


@dataclass
class UniformityReport:
    """Spread of the loss gradient across pixel positions of the student map.

    Attributes:
        max_deviation: max over (sample, channel) of the pairwise gradient
            spread ``max_i g_i - min_i g_i`` across pixels
        max_grad: largest gradient magnitude
    """

    loss_kind: str
    max_deviation: float
    max_grad: float

    @property
    def relative_deviation(self) -> float:
        return self.max_deviation / self.max_grad if self.max_grad > 0 else 0.0

    def uniform(self, rel_tol: float = 1e-6) -> bool:
        return self.max_deviation <= rel_tol * self.max_grad


def gradient_uniformity_check(
    loss_kind: str,
    s: Optional[np.ndarray] = None,
    t: Optional[np.ndarray] = None,
    negatives: Optional[np.ndarray] = None,
    tau: float = 0.2,
    seed: int = 0,
    shape: Sequence[int] = (2, 8, 4, 4),
) -> UniformityReport:
    """Probe dL/ds at every pixel of a student map under the chosen loss.

    Missing inputs are drawn from Gaussian noise; by default four random
    negatives are used.
    """
    if loss_kind not in LEVELS:
        raise ValidationError(f"loss_kind must be one of {', '.join(LEVELS)}", field="loss_kind", value=loss_kind)
    rng = SplitMix64(seed)
    if s is None:
        s = rng.gaussian(int(np.prod(shape))).reshape(shape)
    s = np.asarray(s, dtype=np.float64)
    if t is None:
        t = rng.gaussian(s.size).reshape(s.shape)
    if negatives is None:
        negatives = normalize_rows(rng.gaussian(4 * s.shape[1]).reshape(4, s.shape[1]))

    probe = Tensor(s, requires_grad=True)
    cfg = LossConfig(tau=tau, level=loss_kind)
    loss = distillation_loss(probe, np.asarray(t), np.asarray(negatives), cfg)
    backward(loss)
    g = probe.grad.astype(np.float64)
    spread = g.max(axis=(2, 3)) - g.min(axis=(2, 3))
    report = UniformityReport(loss_kind, float(spread.max()), float(np.abs(g).max()))
    logger.debug(f"gradient uniformity ({loss_kind}): deviation {report.max_deviation:.3e}, max grad {report.max_grad:.3e}")
    return report


@dataclass
class StepLoss:
    """Loss of one optimization step plus what the loop needs afterwards.

    Attributes:
        loss: scalar loss tensor (backward not yet run)
        keys: pooled teacher maps to enqueue after the backward pass
        pixel_cosine: mean per-pixel cosine between student output and teacher
    """

    loss: Tensor
    keys: List[np.ndarray] = field(default_factory=list)
    pixel_cosine: float = 0.0


def symmetric_loss(view_a: Tensor, view_b: Optional[Tensor], student, teacher, queue, cfg: LossConfig) -> StepLoss:
    """Distillation loss over a pair of views sharing one queue snapshot.

    In symmetric mode the result is the mean of the per-view losses; in
    asymmetric mode only ``view_a`` is used. The caller pushes ``keys`` into
    the queue once the backward pass is done.
    """
    negatives = queue.snapshot() if isinstance(queue, MemoryQueue) else queue
    views = [view_a, view_b] if cfg.symmetric and view_b is not None else [view_a]

    losses, keys, cosines = [], [], []
    for view in views:
        _, s_star = student(view)
        t = teacher(view)
        losses.append(distillation_loss(s_star, t, negatives, cfg))
        keys.append(t.data.astype(np.float64).mean(axis=(2, 3)))
        cosines.append(pixel_cosine(s_star, t))

    loss = losses[0] if len(losses) == 1 else scale(losses[0] + losses[1], 0.5)
    if cfg.enqueue == "one":
        keys = keys[:1]
    return StepLoss(loss, keys, float(np.mean(cosines)))
