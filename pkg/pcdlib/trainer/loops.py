#!/usr/bin/env python3
"""Teacher pre-training and distillation loops."""

import logging
import math
from dataclasses import dataclass
from typing import Any, List, Optional, Tuple

import numpy as np

from ..checkpoint import Checkpoint
from ..distillation import MemoryQueue, contrastive_loss, normalize_rows, symmetric_loss
from ..exceptions import CheckpointError, DivergenceError, GradientError
from ..modelzoo import (
    Student,
    Teacher,
    TeacherNetwork,
    norm_rescale_export,
    student_checkpoint,
    teacher_checkpoint,
)
from ..nn import frozen_buffers
from ..nn.functional import l2_normalize
from ..rng import RngStreams, derive_seed
from ..tensor import Tensor, backward, no_grad, scale
from .data import ImageStore, epoch_order, view_batch
from .optim import LARS, OptimConfig, lr_schedule

logger = logging.getLogger("pcdlib")

QUEUE_PATH = "queue.buffer"


@dataclass
class StepRecord:
    step: int
    loss: float
    pixel_cosine: float
    lr: float

    def line(self) -> str:
        return f"{self.step}\t{self.loss:.6f}\t{self.pixel_cosine:.6f}\t{self.lr:.6g}"


class MetricsLog:
    """Per-step metrics, optionally appended to a tab-separated file."""

    def __init__(self, path: Optional[str] = None) -> None:
        self.path = path
        self.records: List[StepRecord] = []

    def append(self, record: StepRecord) -> None:
        self.records.append(record)
        if self.path:
            with open(self.path, "a") as f:
                f.write(record.line() + "\n")


def read_metrics(path: str) -> List[StepRecord]:
    records = []
    with open(path) as f:
        for line in f:
            if not line.strip():
                continue
            step, loss, cosine, lr = line.rstrip("\n").split("\t")
            records.append(StepRecord(int(step), float(loss), float(cosine), float(lr)))
    return records


@dataclass
class RunPlan:
    """Step bookkeeping derived from the dataset size and the optimizer settings."""

    n_images: int
    batch_size: int
    steps_per_epoch: int
    total_steps: int
    warmup_steps: int
    peak_lr: float

    def indices(self, step: int, streams: RngStreams) -> np.ndarray:
        epoch, k = divmod(step, self.steps_per_epoch)
        order = epoch_order(self.n_images, epoch, streams)
        return order[k * self.batch_size:(k + 1) * self.batch_size]

    def lr(self, step: int) -> float:
        return lr_schedule(step, self.total_steps, self.warmup_steps, self.peak_lr)


def plan_run(n_images: int, optim: OptimConfig) -> RunPlan:
    batch = min(optim.batch_size, n_images)
    steps_per_epoch = max(1, n_images // batch)
    total = optim.steps or max(1, int(round(optim.epochs * steps_per_epoch)))
    warmup = min(int(round(total * optim.warmup_epochs / optim.epochs)), total - 1)
    return RunPlan(n_images, batch, steps_per_epoch, total, warmup, optim.peak_lr)


def _check_loss(loss: Tensor, step: int) -> float:
    value = loss.item()
    if not math.isfinite(value):
        logger.error(f"loss is {value} at step {step}")
        raise DivergenceError(step, value)
    return value


def _optimizer_step(opt: LARS, lr: float, step: int) -> None:
    try:
        opt.step(lr)
    except GradientError as e:
        logger.error(f"step {step}: {e}")
        raise DivergenceError(step, str(e), what="gradient") from e


def _log_step(record: StepRecord, plan: RunPlan, every: int, what: str) -> None:
    if record.step % every == 0 or record.step == plan.total_steps - 1:
        logger.info(
            f"{what} step {record.step + 1}/{plan.total_steps}: loss {record.loss:.4f}, "
            f"cosine {record.pixel_cosine:.4f}, lr {record.lr:.4g}"
        )


# ------------------------------------------------------------ pre-training


def pretrain_teacher(
    cfg,
    store: ImageStore,
    seed: Optional[int] = None,
    random_init: bool = False,
    metrics: Optional[MetricsLog] = None,
) -> Tuple[TeacherNetwork, Checkpoint]:
    """Train a teacher backbone + vector head with image-level InfoNCE against a queue.

    Keys come from the same network without gradient (no momentum encoder);
    the key forward normalizes with batch statistics but leaves the BN
    running statistics to the query branch.
    With ``random_init`` the freshly initialized network is returned untrained.
    """
    store.require_nonempty()
    seed = cfg.seed if seed is None else seed
    streams = RngStreams(seed)
    spec = cfg.model.teacher_spec()
    net = TeacherNetwork(spec, seed=derive_seed(seed, "teacher_init"))
    lineage = [seed, "teacher_init"]
    if random_init:
        logger.info("teacher left at random initialization")
        return net, teacher_checkpoint(net, lineage + ["random_init"])

    metrics = metrics or MetricsLog()
    queue = MemoryQueue(cfg.loss.queue_capacity, spec.out_dim)
    opt = LARS(net.named_parameters(), cfg.optim)
    plan = plan_run(len(store), cfg.optim)
    tau = cfg.loss.tau
    logger.info(f"pre-training teacher: {plan.total_steps} steps, batch {plan.batch_size}, peak lr {plan.peak_lr:.4g}")

    for step in range(plan.total_steps):
        a, b = view_batch(store, plan.indices(step, streams), cfg.augment, streams, step, cfg.data.image_size)
        lr = plan.lr(step)
        net.train()
        opt.zero_grad()
        negatives = queue.snapshot()

        pairs = [(a, b), (b, a)] if cfg.loss.symmetric else [(a, b)]
        losses, keys, agreement = [], [], []
        for query_view, key_view in pairs:
            q = l2_normalize(net(Tensor(query_view)), axis=1)
            with no_grad(), frozen_buffers(net):
                k = normalize_rows(net(Tensor(key_view)).data)
            losses.append(contrastive_loss(q, k, negatives, tau))
            keys.append(k)
            agreement.append(float(np.mean(np.sum(q.data * k, axis=1))))
        loss = losses[0] if len(losses) == 1 else scale(losses[0] + losses[1], 0.5)

        value = _check_loss(loss, step)
        backward(loss)
        _optimizer_step(opt, lr, step)
        for k in (keys if cfg.loss.enqueue == "both" else keys[:1]):
            queue.push(k)

        record = StepRecord(step, value, float(np.mean(agreement)), lr)
        metrics.append(record)
        _log_step(record, plan, cfg.optim.log_every, "pretrain")

    net.eval()
    return net, teacher_checkpoint(net, lineage + [f"pretrained:{plan.total_steps}"])


# ------------------------------------------------------------ distillation


@dataclass
class DistillResult:
    student: Student
    queue: MemoryQueue
    records: List[StepRecord]
    raw: Checkpoint
    exported: Checkpoint
    steps: int = 0


def raw_checkpoint(student: Student, opt: LARS, queue: MemoryQueue, step: int, seed: int, config: Any) -> Checkpoint:
    """Resumable checkpoint: weights, BN statistics, momentum buffers, queue, step counter."""
    c = student_checkpoint(student, step=step, seed=seed, queue_capacity=queue.capacity, config=config)
    c.update(opt.state_dict().items())
    c.add(QUEUE_PATH, queue.snapshot())
    return c


def resume_state(c: Checkpoint, student: Student, opt: LARS, queue: MemoryQueue) -> int:
    """Restore ``student``, optimizer and queue from a raw checkpoint; returns the next step."""
    if "step" not in c.metadata or QUEUE_PATH not in c:
        raise CheckpointError("checkpoint is not resumable (no step counter or queue state)")
    wanted = set(student.state_dict())
    student.load_state_dict({k: v for k, v in c.entries.items() if k in wanted})
    opt.load_state_dict(c.entries)
    queue.load(c[QUEUE_PATH])
    return int(c.metadata["step"])


def distill(
    cfg,
    teacher: Teacher,
    store: ImageStore,
    seed: Optional[int] = None,
    resume: Optional[Checkpoint] = None,
    metrics: Optional[MetricsLog] = None,
    stop_at: Optional[int] = None,
) -> DistillResult:
    """Distill ``teacher`` into a fresh student on ``store``.

    Each step draws a view pair per image, runs student and teacher on the
    same views, applies the configured loss, takes a LARS step and only
    then enqueues the teacher keys. With ``stop_at`` the run halts early on
    the full-run schedule; the raw checkpoint resumes it from there.
    """
    store.require_nonempty()
    seed = cfg.seed if seed is None else seed
    streams = RngStreams(seed)
    dim = teacher.out_channels
    student = Student(cfg.model.student_spec(dim), seed=derive_seed(seed, "student_init"))
    queue = MemoryQueue(cfg.loss.queue_capacity, dim)
    opt = LARS(student.named_parameters(), cfg.optim)
    plan = plan_run(len(store), cfg.optim)
    metrics = metrics or MetricsLog()

    start = 0
    if resume is not None:
        start = resume_state(resume, student, opt, queue)
        logger.info(f"resuming distillation at step {start}")
    logger.info(
        f"distilling: {plan.total_steps} steps, level {cfg.loss.level}, "
        f"{'symmetric' if cfg.loss.symmetric else 'asymmetric'}, peak lr {plan.peak_lr:.4g}"
    )

    end = plan.total_steps if stop_at is None else min(stop_at, plan.total_steps)
    for step in range(start, end):
        indices = plan.indices(step, streams)
        a, b = view_batch(store, indices, cfg.augment, streams, step, cfg.data.image_size)
        if not cfg.loss.symmetric:
            # one view per image, drawn from either distribution
            pick = streams.derive("view_choice", step).uniform(len(indices)) < 0.5
            a, b = np.where(pick[:, None, None, None], a, b), None
        lr = plan.lr(step)
        student.train()
        opt.zero_grad()

        out = symmetric_loss(Tensor(a), None if b is None else Tensor(b), student, teacher, queue, cfg.loss)
        value = _check_loss(out.loss, step)
        backward(out.loss)
        _optimizer_step(opt, lr, step)
        for keys in out.keys:
            queue.push(keys)

        record = StepRecord(step, value, out.pixel_cosine, lr)
        metrics.append(record)
        _log_step(record, plan, cfg.optim.log_every, "distill")

    student.eval()
    raw = raw_checkpoint(student, opt, queue, max(end, start), seed, cfg.to_dict())
    anchor = cfg.export.anchor if cfg.export.norm_rescale else None
    exported = norm_rescale_export(student, anchor)
    return DistillResult(student, queue, metrics.records, raw, exported, max(end, start))
