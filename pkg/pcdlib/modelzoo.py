#!/usr/bin/env python3
"""Backbones, the student and teacher networks, and checkpoint assembly.

Backbones are micro residual networks: a 3x3 stem followed by stages of basic
blocks (two 3x3 convolutions with BN and ReLU, identity or 1x1 projection
shortcut). They emit feature maps; there is no global pooling inside.
"""

import logging
from dataclasses import asdict, dataclass, field
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np

from .adaptor import MAP, VECTOR, HeadSpec, adapt_head, verify_invariance
from .checkpoint import FORMAT_VERSION, Checkpoint
from .exceptions import (
    AdaptationError,
    CheckpointError,
    DomainError,
    InvarianceError,
    ShapeError,
    ValidationError,
)
from .nn import BatchNorm, Conv2d, Linear, Module, MultiHeadSelfAttention, ReLU, Sequential
from .nn.functional import conv_output_size, global_avg_pool
from .rng import SplitMix64
from .tensor import Tensor, add, no_grad, relu

logger = logging.getLogger("pcdlib")

ENHANCERS = ("mhsa", "none", "prediction")
TEACHER_VARIANTS = ("adaptor", "backbone", "relu")


# --------------------------------------------------------------- backbones


@dataclass
class BackboneSpec:
    """Micro residual backbone.

    Attributes:
        stem_channels: output channels of the 3x3 stride-1 stem
        stages: per stage ``[blocks, channels, stride]``; the first block of a
            stage carries the stride
        in_channels: input image channels
    """

    stem_channels: int = 32
    stages: List[List[int]] = field(default_factory=lambda: [[2, 32, 2], [2, 64, 2], [2, 128, 2]])
    in_channels: int = 3

    def __post_init__(self) -> None:
        self.stages = [list(map(int, s)) for s in self.stages]

    def validate(self) -> None:
        if self.stem_channels < 1 or self.in_channels < 1:
            raise ValidationError("backbone channels must be >= 1", field="stem_channels", value=self.stem_channels)
        if not self.stages:
            raise ValidationError("backbone needs at least one stage", field="stages")
        for blocks, channels, stride in self.stages:
            if blocks < 1 or channels < 1 or stride < 1:
                raise ValidationError(
                    f"invalid stage [{blocks}, {channels}, {stride}]", field="stages", value=self.stages
                )

    @property
    def out_channels(self) -> int:
        return self.stages[-1][1]

    @property
    def stride(self) -> int:
        return int(np.prod([s[2] for s in self.stages]))

    def output_size(self, size: int) -> int:
        """Spatial size of the output map for a ``size x size`` input."""
        for _, _, stride in self.stages:
            size = conv_output_size(size, 3, stride, 1)
            if size < 1:
                raise ShapeError("backbone", message="backbone: stage strides reduce the input below 1 pixel")
        return size

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: Dict[str, Any]) -> "BackboneSpec":
        return cls(d["stem_channels"], d["stages"], d.get("in_channels", 3))


class BasicBlock(Module):
    """Two 3x3 conv-BN layers with a residual shortcut, followed by ReLU."""

    kind = "block"

    def __init__(self, in_channels: int, out_channels: int, stride: int, rng: SplitMix64) -> None:
        super().__init__()
        self.conv1 = Conv2d(in_channels, out_channels, 3, stride, 1, bias=False, rng=rng)
        self.bn1 = BatchNorm(out_channels)
        self.conv2 = Conv2d(out_channels, out_channels, 3, 1, 1, bias=False, rng=rng)
        self.bn2 = BatchNorm(out_channels)
        self.shortcut = None
        if stride != 1 or in_channels != out_channels:
            self.shortcut = Sequential(
                Conv2d(in_channels, out_channels, 1, stride, 0, bias=False, rng=rng),
                BatchNorm(out_channels),
            )

    def forward(self, x: Tensor) -> Tensor:
        out = relu(self.bn1(self.conv1(x)))
        out = self.bn2(self.conv2(out))
        identity = x if self.shortcut is None else self.shortcut(x)
        return relu(add(out, identity))


class Backbone(Module):
    kind = "backbone"

    def __init__(self, spec: BackboneSpec, rng: SplitMix64) -> None:
        super().__init__()
        spec.validate()
        self.spec = spec
        self.stem = Sequential(
            Conv2d(spec.in_channels, spec.stem_channels, 3, 1, 1, bias=False, rng=rng),
            BatchNorm(spec.stem_channels),
            ReLU(),
        )
        self.stages = Sequential()
        channels = spec.stem_channels
        for blocks, out_channels, stride in spec.stages:
            stage = Sequential()
            for i in range(blocks):
                stage.append(BasicBlock(channels, out_channels, stride if i == 0 else 1, rng))
                channels = out_channels
            self.stages.append(stage)

    @property
    def out_channels(self) -> int:
        return self.spec.out_channels

    def forward(self, x: Tensor) -> Tensor:
        if x.ndim != 4 or x.shape[1] != self.spec.in_channels:
            raise ShapeError("backbone", f"[N, {self.spec.in_channels}, H, W]", list(x.shape))
        self.spec.output_size(min(x.shape[2], x.shape[3]))
        return self.stages(self.stem(x))


def build_backbone(spec: BackboneSpec, seed: int = 0) -> Backbone:
    """Backbone with Kaiming fan-in Gaussian kernels drawn from one seeded stream."""
    return Backbone(spec, SplitMix64(seed))


# ------------------------------------------------------------------- heads


def mlp_block(in_dim: int, hidden: int, out_dim: int, rng: SplitMix64) -> Sequential:
    """Conv1x1(in -> hidden) - BN - ReLU - Conv1x1(hidden -> out)."""
    return Sequential(
        Conv2d(in_dim, hidden, 1, rng=rng),
        BatchNorm(hidden),
        ReLU(),
        Conv2d(hidden, out_dim, 1, rng=rng),
    )


def vector_head(in_dim: int, hidden: int, out_dim: int, rng: SplitMix64) -> HeadSpec:
    """FC - BN - ReLU - FC - BN(no affine), the pre-training projection head."""
    return HeadSpec(
        Linear(in_dim, hidden, bias=False, rng=rng),
        BatchNorm(hidden, layout=VECTOR),
        ReLU(),
        Linear(hidden, out_dim, bias=False, rng=rng),
        BatchNorm(out_dim, affine=False, layout=VECTOR),
        input_kind=VECTOR,
    )


# ----------------------------------------------------------------- student


@dataclass
class StudentSpec:
    """Student network: backbone, two-MLP projection head, optional enhancer.

    ``enhancer`` is ``mhsa`` (attention after the head), ``none``, or
    ``prediction`` (an extra MLP block sized like the attention module).
    """

    backbone: BackboneSpec = field(
        default_factory=lambda: BackboneSpec(16, [[1, 32, 2], [1, 64, 2], [1, 128, 2]])
    )
    hidden: int = 256
    out_dim: int = 64
    enhancer: str = "mhsa"
    heads: int = 4
    head_dim: int = 16
    output_relu: bool = False

    def validate(self) -> None:
        self.backbone.validate()
        if self.enhancer not in ENHANCERS:
            raise ValidationError(f"unknown enhancer '{self.enhancer}'", field="enhancer", value=self.enhancer)
        if self.hidden < 1 or self.out_dim < 1:
            raise ValidationError("student head dims must be >= 1", field="hidden")

    def to_dict(self) -> Dict[str, Any]:
        d = asdict(self)
        d["backbone"] = self.backbone.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: Dict[str, Any]) -> "StudentSpec":
        d = dict(d)
        d["backbone"] = BackboneSpec.from_dict(d["backbone"])
        return cls(**d)


class Student(Module):
    """Student network returning the backbone map and the projected output."""

    kind = "student"

    def __init__(self, spec: StudentSpec, seed: int = 0) -> None:
        super().__init__()
        spec.validate()
        rng = SplitMix64(seed)
        self.spec = spec
        self.backbone = Backbone(spec.backbone, rng)
        c = spec.backbone.out_channels
        self.head = Sequential(
            mlp_block(c, spec.hidden, spec.out_dim, rng),
            mlp_block(spec.out_dim, spec.hidden, spec.out_dim, rng),
        )
        self.enhancer = None
        if spec.enhancer == "mhsa":
            self.enhancer = MultiHeadSelfAttention(spec.out_dim, spec.heads, spec.head_dim, rng=rng)
        elif spec.enhancer == "prediction":
            self.enhancer = mlp_block(spec.out_dim, 2 * spec.heads * spec.head_dim, spec.out_dim, rng)
        self.output = ReLU() if spec.output_relu else None

    def forward(self, x: Tensor) -> Tuple[Tensor, Tensor]:
        s = self.backbone(x)
        s_star = self.head(s)
        if self.enhancer is not None:
            s_star = self.enhancer(s_star)
        if self.output is not None:
            s_star = self.output(s_star)
        return s, s_star


# ----------------------------------------------------------------- teacher


@dataclass
class TeacherSpec:
    backbone: BackboneSpec = field(default_factory=BackboneSpec)
    hidden: int = 256
    out_dim: int = 64

    def to_dict(self) -> Dict[str, Any]:
        return {"backbone": self.backbone.to_dict(), "hidden": self.hidden, "out_dim": self.out_dim}


class TeacherNetwork(Module):
    """Backbone plus vector projection head, as trained during pre-training."""

    kind = "teacher_network"

    def __init__(self, spec: TeacherSpec, seed: int = 0) -> None:
        super().__init__()
        rng = SplitMix64(seed)
        self.spec = spec
        self.backbone = Backbone(spec.backbone, rng)
        self.head = vector_head(spec.backbone.out_channels, spec.hidden, spec.out_dim, rng)

    def forward(self, x: Tensor) -> Tensor:
        return self.head(global_avg_pool(self.backbone(x)))


class Teacher(Module):
    """Frozen teacher emitting feature maps.

    ``variant`` is ``adaptor`` (backbone + adapted head), ``backbone`` (raw
    backbone maps) or ``relu`` (adapted head with plain ReLU kept on maps).
    Forward runs in inference mode and never records a graph.
    """

    kind = "teacher"

    def __init__(self, backbone: Backbone, head: Optional[HeadSpec], variant: str = "adaptor") -> None:
        super().__init__()
        if variant not in TEACHER_VARIANTS:
            raise ValidationError(f"unknown teacher variant '{variant}'", field="variant", value=variant)
        if head is not None and head.input_kind != MAP:
            raise AdaptationError("teacher head must be map-kind")
        self.backbone = backbone
        self.head = head
        self.variant = variant
        self.eval()
        self.freeze()

    @property
    def out_channels(self) -> int:
        return self.head.out_features if self.head is not None else self.backbone.out_channels

    def train(self, mode: bool = True) -> "Teacher":
        # always inference
        return super().train(False)

    def forward(self, x: Tensor) -> Tensor:
        with no_grad():
            t = self.backbone(x)
            if self.head is not None:
                t = self.head(t)
        return t


# ------------------------------------------------------------- checkpoints


def _metadata(model: str, **extra: Any) -> Dict[str, Any]:
    meta = {"format_version": FORMAT_VERSION, "model": model}
    meta.update(extra)
    return meta


def teacher_checkpoint(net: TeacherNetwork, seed_lineage: Sequence[Any] = ()) -> Checkpoint:
    """Vector-kind teacher checkpoint (backbone + pre-training head)."""
    c = Checkpoint(
        _metadata(
            "teacher",
            head_kind=VECTOR,
            backbone=net.spec.backbone.to_dict(),
            head=net.head.describe(),
            seed_lineage=list(seed_lineage),
        )
    )
    c.update(net.backbone.state_dict("backbone.").items())
    c.update(net.head.state_dict("head.").items())
    return c


def adapted_teacher_checkpoint(teacher: Teacher, source: Checkpoint) -> Checkpoint:
    """Map-kind checkpoint of an assembled teacher; metadata lineage copied from ``source``."""
    meta = dict(source.metadata)
    meta.update(head_kind=MAP, variant=teacher.variant)
    meta["head"] = teacher.head.describe() if teacher.head is not None else None
    c = Checkpoint(meta)
    c.update(teacher.backbone.state_dict("backbone.").items())
    if teacher.head is not None:
        c.update(teacher.head.state_dict("head.").items())
    return c


def load_backbone(c: Checkpoint) -> Backbone:
    try:
        spec = BackboneSpec.from_dict(c.metadata["backbone"])
    except (KeyError, TypeError) as e:
        raise CheckpointError(f"checkpoint has no backbone description: {e}") from e
    backbone = Backbone(spec, SplitMix64(0))
    backbone.load_state_dict(c.subset("backbone."))
    return backbone


def load_head(c: Checkpoint) -> HeadSpec:
    desc = c.metadata.get("head")
    if not desc:
        raise CheckpointError("checkpoint has no projection head")
    head = HeadSpec.from_description(desc)
    head.load_state_dict(c.subset("head."))
    head.eval()
    return head


def assemble_teacher(
    c: Checkpoint,
    drop_flag: bool = True,
    variant: str = "adaptor",
    tol: float = 1e-5,
    trials: int = 64,
) -> Teacher:
    """Build a frozen teacher from a teacher checkpoint.

    A vector-kind head is adapted and must pass the invariance check; a
    map-kind head (already adapted) is used as stored, keeping its stored
    variant with a warning when ``variant`` asks for another.
    """
    if c.metadata.get("model") != "teacher":
        raise CheckpointError(f"not a teacher checkpoint (model '{c.metadata.get('model')}')")
    backbone = load_backbone(c)
    if variant == "backbone":
        logger.info("teacher variant 'backbone': projection head removed")
        return Teacher(backbone, None, variant)

    head = load_head(c)
    if head.input_kind == MAP:
        stored = c.metadata.get("variant", variant)
        if stored != variant:
            logger.warning(f"teacher head already adapted as '{stored}'; requested variant '{variant}' ignored")
        return Teacher(backbone, head, stored)

    activation = "relu" if variant == "relu" else "cw_relu"
    adapted = adapt_head(head, drop_trailing_affine_free_bn=drop_flag, activation=activation)
    report = verify_invariance(head, adapted, trials=trials, tol=tol, drop_trailing_affine_free_bn=drop_flag)
    if variant == "relu":
        logger.warning(f"teacher variant 'relu': invariance not enforced (deviation {report.max_abs_dev:.3e})")
    elif not report.passed:
        logger.error(f"teacher head failed invariance check: {report.max_abs_dev:.3e} > {tol:.1e}")
        raise InvarianceError(report)
    return Teacher(backbone, adapted, variant)


def student_checkpoint(student: Student, **extra: Any) -> Checkpoint:
    """Raw student checkpoint: backbone, head and enhancer, unscaled."""
    c = Checkpoint(_metadata("student", spec=student.spec.to_dict(), **extra))
    c.update(student.state_dict().items())
    return c


def load_student(c: Checkpoint) -> Student:
    if c.metadata.get("model") != "student":
        raise CheckpointError(f"not a raw student checkpoint (model '{c.metadata.get('model')}')")
    student = Student(StudentSpec.from_dict(c.metadata["spec"]))
    # raw checkpoints also carry optimizer and queue state next to the weights
    wanted = set(student.state_dict())
    student.load_state_dict({k: v for k, v in c.entries.items() if k in wanted})
    return student


def conv_kernel_paths(backbone: Backbone, prefix: str = "backbone.") -> List[str]:
    return [f"{prefix}{name}.kernel" for name, m in backbone.named_modules() if isinstance(m, Conv2d)]


def norm_rescale_export(student: Student, anchor: Optional[float] = 0.25) -> Checkpoint:
    """Backbone-only export with every convolution kernel multiplied by ``anchor``.

    The projection head and the enhancer are dropped; BN parameters, BN
    statistics and biases are copied unchanged. ``anchor=None`` exports
    without rescaling.
    """
    if anchor is not None and not anchor > 0:
        raise DomainError(f"norm-rescale anchor must be positive, got {anchor}")
    kernels = set(conv_kernel_paths(student.backbone))
    c = Checkpoint(
        _metadata(
            "backbone",
            backbone=student.spec.backbone.to_dict(),
            norm_rescale_anchor=anchor,
        )
    )
    factor = np.float32(anchor) if anchor is not None else None
    for path, array in student.backbone.state_dict("backbone.").items():
        if factor is not None and path in kernels:
            array = array * factor
        c.add(path, array)
    logger.debug(f"exported {len(c.entries)} backbone entries, {len(kernels)} kernels rescaled by {anchor}")
    return c
