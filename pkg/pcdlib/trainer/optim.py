#!/usr/bin/env python3
"""LARS optimizer and the warmup + cosine learning-rate schedule."""

import logging
import math
from collections import OrderedDict
from dataclasses import dataclass
from typing import Dict, Iterable, Optional, Tuple

import numpy as np

from ..exceptions import GradientError, ValidationError
from ..nn import Parameter

logger = logging.getLogger("pcdlib")

MOMENTUM_PREFIX = "optim.momentum."


@dataclass
class OptimConfig:
    """Optimization settings.

    Attributes:
        base_lr: learning rate at batch size 256 (linear scaling rule)
        batch_size: images per step
        epochs: passes over the dataset
        warmup_epochs: linear warmup length, must be below ``epochs``
        momentum: LARS momentum
        weight_decay: L2 coefficient (never applied to biases or BN affine)
        trust_coefficient: scale of the trust ratio
        exclude_from_trust_ratio: biases and BN affine also skip the trust ratio
        steps: run exactly this many steps instead of ``epochs`` worth
        log_every: INFO log interval in steps
    """

    base_lr: float = 0.02
    batch_size: int = 64
    epochs: float = 5.0
    warmup_epochs: float = 0.5
    momentum: float = 0.9
    weight_decay: float = 1e-5
    trust_coefficient: float = 1.0
    exclude_from_trust_ratio: bool = True
    steps: Optional[int] = None
    log_every: int = 10

    def validate(self) -> None:
        if self.base_lr <= 0:
            raise ValidationError("must be positive", field="base_lr", value=self.base_lr)
        if self.batch_size < 1:
            raise ValidationError("must be >= 1", field="batch_size", value=self.batch_size)
        if self.epochs <= 0:
            raise ValidationError("must be positive", field="epochs", value=self.epochs)
        if not 0 <= self.warmup_epochs < self.epochs:
            raise ValidationError("must satisfy 0 <= warmup_epochs < epochs", field="warmup_epochs", value=self.warmup_epochs)
        if not 0 <= self.momentum < 1:
            raise ValidationError("must lie in [0, 1)", field="momentum", value=self.momentum)
        if self.weight_decay < 0:
            raise ValidationError("must be non-negative", field="weight_decay", value=self.weight_decay)
        if self.trust_coefficient <= 0:
            raise ValidationError("must be positive", field="trust_coefficient", value=self.trust_coefficient)
        if self.steps is not None and self.steps < 1:
            raise ValidationError("must be >= 1", field="steps", value=self.steps)
        if self.log_every < 1:
            raise ValidationError("must be >= 1", field="log_every", value=self.log_every)

    @property
    def peak_lr(self) -> float:
        return peak_lr(self.base_lr, self.batch_size)


def peak_lr(base_lr: float, batch_size: int) -> float:
    """Linear scaling rule: ``base_lr * batch_size / 256``."""
    return base_lr * batch_size / 256


def lr_schedule(step: int, total_steps: int, warmup_steps: int, peak: float) -> float:
    """Linear warmup from 0 to ``peak`` over ``warmup_steps``, then cosine decay to 0."""
    if warmup_steps >= total_steps:
        raise ValidationError(
            f"warmup ({warmup_steps} steps) must be shorter than the run ({total_steps} steps)",
            field="warmup_steps",
            value=warmup_steps,
        )
    if not 0 <= step < total_steps:
        raise ValidationError(f"step {step} outside [0, {total_steps})", field="step", value=step)
    if step < warmup_steps:
        return peak * step / warmup_steps
    u = (step - warmup_steps) / (total_steps - warmup_steps)
    return peak * 0.5 * (1.0 + math.cos(math.pi * u))


def lars_update(
    w: np.ndarray,
    g: np.ndarray,
    m: np.ndarray,
    lr: float,
    momentum: float,
    weight_decay: float,
    trust_coefficient: float = 1.0,
    use_trust_ratio: bool = True,
) -> Tuple[np.ndarray, np.ndarray]:
    """One LARS update of a single tensor; returns ``(new_w, new_m)``.

    ``lambda = eta * |w| / (|g| + wd * |w|)`` when both norms are positive,
    else 1; ``m <- momentum * m + lambda * lr * (g + wd * w)``; ``w <- w - m``.
    """
    w64 = w.astype(np.float64)
    g64 = g.astype(np.float64)
    trust = 1.0
    if use_trust_ratio:
        w_norm = float(np.linalg.norm(w64))
        g_norm = float(np.linalg.norm(g64))
        if w_norm > 0 and g_norm > 0:
            trust = trust_coefficient * w_norm / (g_norm + weight_decay * w_norm)
    new_m = momentum * m.astype(np.float64) + trust * lr * (g64 + weight_decay * w64)
    return w64 - new_m, new_m


class LARS:
    """LARS over named parameters.

    Parameters with ``decay=False`` (biases, BN affine) get no weight decay
    and, with ``exclude_from_trust_ratio``, a unit trust ratio. Momentum
    buffers are float32 so they round-trip through checkpoints exactly.
    """

    def __init__(self, named_params: Iterable[Tuple[str, Parameter]], cfg: OptimConfig) -> None:
        self.params: "OrderedDict[str, Parameter]" = OrderedDict(named_params)
        self.cfg = cfg
        self.momentum: Dict[str, np.ndarray] = {
            path: np.zeros(p.shape, dtype=np.float32) for path, p in self.params.items()
        }

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def step(self, lr: float) -> None:
        """Apply one update; a non-finite gradient aborts before any tensor changes."""
        for path, p in self.params.items():
            if p.grad is not None and not np.all(np.isfinite(p.grad)):
                raise GradientError(f"non-finite gradient in '{path}'")
        cfg = self.cfg
        for path, p in self.params.items():
            grad = p.grad if p.grad is not None else np.zeros(p.shape, dtype=np.float32)
            excluded = not p.decay
            new_w, new_m = lars_update(
                p.data,
                grad,
                self.momentum[path],
                lr,
                cfg.momentum,
                0.0 if excluded else cfg.weight_decay,
                cfg.trust_coefficient,
                use_trust_ratio=not (excluded and cfg.exclude_from_trust_ratio),
            )
            p.data = new_w.astype(p.data.dtype)
            self.momentum[path] = new_m.astype(np.float32)

    def state_dict(self) -> "OrderedDict[str, np.ndarray]":
        return OrderedDict((MOMENTUM_PREFIX + path, m.copy()) for path, m in self.momentum.items())

    def load_state_dict(self, state: Dict[str, np.ndarray]) -> None:
        for path in self.params:
            key = MOMENTUM_PREFIX + path
            if key not in state:
                raise ValidationError(f"missing optimizer state '{key}'", field="optim")
            self.momentum[path] = np.array(state[key], dtype=np.float32).reshape(self.params[path].shape)
