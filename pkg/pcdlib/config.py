#!/usr/bin/env python3
"""Strict JSON configuration for pcdlib runs.

A config file is a JSON object with the sections ``data``, ``model``,
``loss``, ``optim``, ``augment``, ``export`` and ``erf`` plus the top-level
``seed`` and ``defaults`` keys. Unknown keys, wrong types and constraint
violations are rejected with a ConfigurationError naming the dotted key
path (e.g. ``loss.tau``).
"""

import dataclasses
import json
import logging
import os
import typing
from dataclasses import asdict, dataclass, field
from typing import Any, Dict, List, Optional

from .distillation import LossConfig
from .exceptions import ConfigurationError, DomainError, ValidationError
from .modelzoo import ENHANCERS, TEACHER_VARIANTS, BackboneSpec, StudentSpec, TeacherSpec
from .trainer.data import MIN_IMAGE_SIZE, AugmentPolicy, ViewDistribution
from .trainer.optim import OptimConfig

logger = logging.getLogger("pcdlib")

CONFIG_ENV = "PCDLIB_CONFIG"
SEED_ENV = "PCDLIB_SEED"
PRESETS = ("desk", "full")


@dataclass
class DataConfig:
    n_images: int = 2048
    image_size: int = 32

    def validate(self) -> None:
        if self.n_images < 0:
            raise ValidationError("must be >= 0", field="n_images", value=self.n_images)
        if self.image_size < MIN_IMAGE_SIZE:
            raise ValidationError(f"must be >= {MIN_IMAGE_SIZE}", field="image_size", value=self.image_size)


@dataclass
class ModelConfig:
    """Teacher and student architectures.

    The student's output dimension is not configured: it always matches the
    teacher's output channels (``teacher_out``, or the backbone channels for
    the ``backbone`` teacher variant).
    """

    teacher_backbone: BackboneSpec = field(default_factory=BackboneSpec)
    teacher_hidden: int = 256
    teacher_out: int = 64
    student_backbone: BackboneSpec = field(
        default_factory=lambda: BackboneSpec(16, [[1, 32, 2], [1, 64, 2], [1, 128, 2]])
    )
    student_hidden: int = 256
    enhancer: str = "mhsa"
    heads: int = 4
    head_dim: int = 16
    output_relu: bool = False
    teacher_variant: str = "adaptor"
    drop_last_bn: bool = True

    def validate(self) -> None:
        for name in ("teacher_hidden", "teacher_out", "student_hidden", "heads", "head_dim"):
            if getattr(self, name) < 1:
                raise ValidationError("must be >= 1", field=name, value=getattr(self, name))
        if self.enhancer not in ENHANCERS:
            raise ValidationError(f"must be one of {', '.join(ENHANCERS)}", field="enhancer", value=self.enhancer)
        if self.teacher_variant not in TEACHER_VARIANTS:
            raise ValidationError(
                f"must be one of {', '.join(TEACHER_VARIANTS)}",
                field="teacher_variant",
                value=self.teacher_variant,
            )

    def teacher_spec(self) -> TeacherSpec:
        return TeacherSpec(self.teacher_backbone, self.teacher_hidden, self.teacher_out)

    def student_spec(self, out_dim: int) -> StudentSpec:
        return StudentSpec(
            backbone=self.student_backbone,
            hidden=self.student_hidden,
            out_dim=out_dim,
            enhancer=self.enhancer,
            heads=self.heads,
            head_dim=self.head_dim,
            output_relu=self.output_relu,
        )


@dataclass
class ExportConfig:
    norm_rescale: bool = True
    anchor: float = 0.25

    def validate(self) -> None:
        if not self.anchor > 0:
            raise ValidationError("must be positive", field="anchor", value=self.anchor)


@dataclass
class ErfConfig:
    samples: int = 64
    input_size: int = 32

    def validate(self) -> None:
        if self.samples < 1:
            raise ValidationError("must be >= 1", field="samples", value=self.samples)
        if self.input_size < 1:
            raise ValidationError("must be >= 1", field="input_size", value=self.input_size)


@dataclass
class TrainConfig:
    """Every knob of a run. ``TrainConfig()`` is the desk-scale default set."""

    seed: int = 0
    defaults: bool = True
    data: DataConfig = field(default_factory=DataConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    optim: OptimConfig = field(default_factory=OptimConfig)
    augment: AugmentPolicy = field(default_factory=AugmentPolicy)
    export: ExportConfig = field(default_factory=ExportConfig)
    erf: ErfConfig = field(default_factory=ErfConfig)

    def to_dict(self) -> Dict[str, Any]:
        """Canonical form: every section and key present."""
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"


# ------------------------------------------------------------------ loading


def _join(path: str, name: str) -> str:
    return f"{path}.{name}" if path else name


def _type_name(tp: Any) -> str:
    return {bool: "a boolean", int: "an integer", float: "a number", str: "a string"}.get(tp, "an object")


def _coerce(tp: Any, value: Any, key: str) -> Any:
    origin = typing.get_origin(tp)
    if origin is typing.Union:
        args = [a for a in typing.get_args(tp) if a is not type(None)]
        if value is None:
            return None
        return _coerce(args[0], value, key)
    if origin in (list, List):
        if not isinstance(value, list):
            raise ConfigurationError(f"expected a list, got {type(value).__name__}", key=key)
        (item,) = typing.get_args(tp)
        return [_coerce(item, v, f"{key}[{i}]") for i, v in enumerate(value)]
    if dataclasses.is_dataclass(tp):
        return _build(tp, value, key)
    if tp is bool:
        ok = isinstance(value, bool)
    elif tp is int:
        ok = isinstance(value, int) and not isinstance(value, bool)
    elif tp is float:
        ok = isinstance(value, (int, float)) and not isinstance(value, bool)
        value = float(value) if ok else value
    else:
        ok = isinstance(value, tp)
    if not ok:
        raise ConfigurationError(f"expected {_type_name(tp)}, got {type(value).__name__}", key=key)
    return value


def _build(cls: Any, data: Any, path: str) -> Any:
    """Instantiate dataclass ``cls`` from ``data``; absent keys keep their defaults."""
    if not isinstance(data, dict):
        raise ConfigurationError(f"expected an object, got {type(data).__name__}", key=path or None)
    hints = typing.get_type_hints(cls)
    names = [f.name for f in dataclasses.fields(cls)]
    for key in data:
        if key not in names:
            raise ConfigurationError("unknown key", key=_join(path, key))
    kwargs = {name: _coerce(hints[name], data[name], _join(path, name)) for name in names if name in data}
    obj = cls(**kwargs)
    validate = getattr(obj, "validate", None)
    if validate is not None:
        try:
            validate()
        except (ValidationError, DomainError) as e:
            name = getattr(e, "field", None)
            raise ConfigurationError(str(e), key=_join(path, name) if name else path) from e
    return obj


def parse_config_dict(data: Any) -> TrainConfig:
    """Build a TrainConfig from a decoded JSON document."""
    if not isinstance(data, dict):
        raise ConfigurationError(f"config must be a JSON object, got {type(data).__name__}")
    use_defaults = data.get("defaults", False)
    if not isinstance(use_defaults, bool):
        raise ConfigurationError("expected a boolean", key="defaults")
    if not use_defaults:
        for f in dataclasses.fields(TrainConfig):
            if f.name != "defaults" and f.name not in data:
                raise ConfigurationError("missing required key", key=f.name)
    config = _build(TrainConfig, data, "")
    config.defaults = use_defaults
    return config


def parse_config(path: str) -> TrainConfig:
    try:
        with open(path) as f:
            data = json.load(f)
    except OSError as e:
        raise ConfigurationError(f"cannot read config file {path}: {e.strerror or e}")
    except json.JSONDecodeError as e:
        raise ConfigurationError(f"invalid JSON in {path}: {e}")
    config = parse_config_dict(data)
    logger.debug(f"loaded config from {path}")
    return config


def preset_config(name: str = "desk") -> TrainConfig:
    """Named default sets: ``desk`` (laptop scale) or ``full`` (full-scale ImageNet hyperparameters)."""
    if name == "desk":
        return TrainConfig()
    if name != "full":
        raise ConfigurationError(f"unknown preset '{name}', choose from {', '.join(PRESETS)}", key="preset")
    return TrainConfig(
        data=DataConfig(n_images=2048, image_size=32),
        model=ModelConfig(
            teacher_hidden=4096,
            teacher_out=256,
            student_hidden=4096,
            heads=8,
            head_dim=64,
        ),
        loss=LossConfig(tau=0.2, queue_capacity=65536),
        optim=OptimConfig(
            base_lr=1.0,
            batch_size=1024,
            epochs=100.0,
            warmup_epochs=10.0,
            momentum=0.9,
            weight_decay=1e-5,
            trust_coefficient=0.001,
        ),
        augment=AugmentPolicy(
            ViewDistribution([0.08, 1.0], 0.5, [0.6, 1.4]),
            ViewDistribution([0.08, 1.0], 0.5, [0.6, 1.4]),
        ),
    )


def load_config(path: Optional[str] = None, seed: Optional[int] = None) -> TrainConfig:
    """Resolve the effective config.

    The path falls back to ``$PCDLIB_CONFIG`` and then to the desk preset;
    the seed is ``seed`` if given, else ``$PCDLIB_SEED``, else the file's.
    """
    path = path or os.environ.get(CONFIG_ENV)
    config = parse_config(path) if path else preset_config("desk")
    if seed is None and os.environ.get(SEED_ENV):
        try:
            seed = int(os.environ[SEED_ENV])
        except ValueError:
            raise ConfigurationError(f"expected an integer, got '{os.environ[SEED_ENV]}'", key=SEED_ENV)
    if seed is not None:
        config.seed = seed
    return config
