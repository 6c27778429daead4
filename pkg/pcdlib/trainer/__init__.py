"""Optimization, data pipeline and training loops."""

from .data import AugmentPolicy, ImageStore, ViewDistribution, augment_view, synth_dataset, two_view
from .loops import DistillResult, MetricsLog, StepRecord, distill, plan_run, pretrain_teacher, read_metrics
from .optim import LARS, OptimConfig, lars_update, lr_schedule, peak_lr

__all__ = [
    "AugmentPolicy",
    "DistillResult",
    "ImageStore",
    "LARS",
    "MetricsLog",
    "OptimConfig",
    "StepRecord",
    "ViewDistribution",
    "augment_view",
    "distill",
    "lars_update",
    "lr_schedule",
    "peak_lr",
    "plan_run",
    "pretrain_teacher",
    "read_metrics",
    "synth_dataset",
    "two_view",
]
