#!/usr/bin/env python3
"""High-level facade driving file-based workflows (used by the ``pcdman`` CLI)."""

import hashlib
import logging
import os
from typing import Any, List, Optional, Tuple

from .adaptor import InvarianceReport, adapt_head, verify_invariance
from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .config import TrainConfig, load_config, preset_config
from .datastore import load_store, save_store
from .erf import ErfMap, StudentOutput, compute_erf, erf_radius, toy_model, write_heatmap
from .exceptions import AlreadyAdaptedError, CheckpointError, InvarianceError, ValidationError
from .modelzoo import (
    MAP,
    Teacher,
    adapted_teacher_checkpoint,
    assemble_teacher,
    load_backbone,
    load_head,
    load_student,
    norm_rescale_export,
)
from .nn import Module
from .trainer import DistillResult, MetricsLog, distill, pretrain_teacher, synth_dataset
from .verify import SuiteResult, run_suites

# Module logger
logger = logging.getLogger("pcdlib")

RAW_CHECKPOINT = "raw.pcd"
EXPORTED_CHECKPOINT = "student.pcd"
METRICS_FILE = "metrics.tsv"


def checkpoint_digest(c: Checkpoint) -> str:
    """SHA-256 over entry paths and raw bytes, for frozen-parameter checks."""
    h = hashlib.sha256()
    for path, array in c.entries.items():
        h.update(path.encode("utf-8"))
        h.update(array.tobytes())
    return h.hexdigest()


class PcdSession:
    """One configured run context: config, seed and debug logging.

    Every method is a pure function of the config, the seed and its input
    files, so rerunning a command reproduces its outputs.
    """

    def __init__(
        self,
        config: Optional[TrainConfig] = None,
        config_file: Optional[str] = None,
        seed: Optional[int] = None,
        debug: bool = False,
    ) -> None:
        """Initialize the session.

        Args:
            config: Ready config object (takes precedence over ``config_file``)
            config_file: JSON config path; falls back to $PCDLIB_CONFIG
            seed: Master seed override; falls back to $PCDLIB_SEED
            debug: Enable debug output
        """
        self.debug = debug

        # Configure logging if debug mode is enabled
        if debug and not logger.handlers:
            handler = logging.StreamHandler()
            handler.setFormatter(logging.Formatter("[%(levelname)s] %(message)s"))
            logger.addHandler(handler)
            logger.setLevel(logging.DEBUG)

        if config is not None:
            self.config = config
            if seed is not None:
                self.config.seed = seed
        else:
            self.config = load_config(config_file, seed)
        self.debug_print(f"session seed {self.config.seed}")

    def debug_print(self, *args: Any) -> None:
        """Log debug messages if debug mode is enabled."""
        if self.debug:
            message = " ".join(str(arg) for arg in args)
            logger.debug(message)

    def __enter__(self) -> "PcdSession":
        return self

    def __exit__(self, exc_type, exc_value, traceback) -> None:
        if exc_type is not None:
            self.debug_print(f"session ended with {exc_type.__name__}: {exc_value}")

    @property
    def seed(self) -> int:
        return self.config.seed

    # ------------------------------------------------------------------ data

    def gen_data(self, out_dir: str, n: Optional[int] = None, size: Optional[int] = None) -> int:
        """Generate the synthetic image store into ``out_dir``; returns the image count."""
        n = self.config.data.n_images if n is None else n
        size = self.config.data.image_size if size is None else size
        store = synth_dataset(n, size, self.seed)
        save_store(store, out_dir)
        self.debug_print(f"generated {n} images of {size}x{size} into {out_dir}")
        return len(store)

    # --------------------------------------------------------------- teacher

    def pretrain_teacher(
        self,
        data_dir: str,
        out: str,
        random_init: bool = False,
        metrics_path: Optional[str] = None,
    ) -> Checkpoint:
        store = load_store(data_dir)
        _, c = pretrain_teacher(self.config, store, random_init=random_init, metrics=MetricsLog(metrics_path))
        save_checkpoint(c, out)
        self.debug_print(f"teacher checkpoint written to {out}")
        return c

    def adapt_head(
        self,
        teacher_path: str,
        out: str,
        drop_last_bn: Optional[bool] = None,
        tol: float = 1e-5,
        trials: int = 64,
    ) -> InvarianceReport:
        """Adapt the vector-kind head of a teacher checkpoint and verify invariance.

        The adapted checkpoint is written only when verification passes.
        """
        drop = self.config.model.drop_last_bn if drop_last_bn is None else drop_last_bn
        source = load_checkpoint(teacher_path)
        if source.metadata.get("model") != "teacher":
            raise CheckpointError(f"{teacher_path} is not a teacher checkpoint")
        if source.metadata.get("head_kind") == MAP:
            raise AlreadyAdaptedError(f"{teacher_path}: head is already adapted (map-kind)")
        head = load_head(source)
        adapted = adapt_head(head, drop_trailing_affine_free_bn=drop)
        report = verify_invariance(head, adapted, trials=trials, tol=tol, seed=self.seed, drop_trailing_affine_free_bn=drop)
        if not report.passed:
            logger.error(f"invariance check failed: {report.max_abs_dev:.3e} > {tol:.1e}")
            raise InvarianceError(report)
        teacher = Teacher(load_backbone(source), adapted, "adaptor")
        save_checkpoint(adapted_teacher_checkpoint(teacher, source), out)
        self.debug_print(f"adapted teacher written to {out}")
        return report

    # ----------------------------------------------------------- distillation

    def distill(
        self,
        teacher_path: str,
        data_dir: str,
        out_dir: str,
        level: Optional[str] = None,
        symmetric: Optional[bool] = None,
        resume: Optional[str] = None,
        stop_at: Optional[int] = None,
    ) -> DistillResult:
        """Distill into ``out_dir``: raw checkpoint, exported backbone and metrics log."""
        if level is not None:
            self.config.loss.level = level
        if symmetric is not None:
            self.config.loss.symmetric = symmetric
        self.config.loss.validate()

        model = self.config.model
        teacher = assemble_teacher(
            load_checkpoint(teacher_path),
            drop_flag=model.drop_last_bn,
            variant=model.teacher_variant,
        )
        digest_before = checkpoint_digest(_module_checkpoint(teacher))
        store = load_store(data_dir)
        resume_from = load_checkpoint(resume) if resume else None

        os.makedirs(out_dir, exist_ok=True)
        metrics_path = os.path.join(out_dir, METRICS_FILE)
        if resume_from is None and os.path.exists(metrics_path):
            os.remove(metrics_path)
        result = distill(
            self.config,
            teacher,
            store,
            resume=resume_from,
            metrics=MetricsLog(metrics_path),
            stop_at=stop_at,
        )
        if checkpoint_digest(_module_checkpoint(teacher)) != digest_before:
            raise ValidationError("teacher parameters changed during distillation", field="teacher")

        save_checkpoint(result.raw, os.path.join(out_dir, RAW_CHECKPOINT))
        save_checkpoint(result.exported, os.path.join(out_dir, EXPORTED_CHECKPOINT))
        self.debug_print(f"distillation outputs written to {out_dir}")
        return result

    def export(self, raw_path: str, out: str, anchor: Optional[float] = None, rescale: bool = True) -> Checkpoint:
        """NormRescale export of a raw student checkpoint."""
        student = load_student(load_checkpoint(raw_path))
        anchor = self.config.export.anchor if anchor is None else anchor
        c = norm_rescale_export(student, anchor if rescale else None)
        save_checkpoint(c, out)
        return c

    # -------------------------------------------------------------------- erf

    def probe_model(self, checkpoint: Optional[str] = None, toy: Optional[str] = None, with_head: bool = False) -> Module:
        """Model to probe: a toy architecture or the backbone (optionally student head) of a checkpoint."""
        if (checkpoint is None) == (toy is None):
            raise ValidationError("give exactly one of a checkpoint or a toy model", field="model")
        if toy is not None:
            return toy_model(toy, seed=self.seed)
        c = load_checkpoint(checkpoint)
        if c.metadata.get("model") == "student":
            student = load_student(c)
            return StudentOutput(student) if with_head else student.backbone
        if with_head:
            raise ValidationError("--with-head needs a raw student checkpoint", field="with_head")
        return load_backbone(c)

    def erf(
        self,
        out: str,
        fmt: str = "pgm",
        checkpoint: Optional[str] = None,
        toy: Optional[str] = None,
        with_head: bool = False,
        samples: Optional[int] = None,
        input_size: Optional[int] = None,
    ) -> Tuple[ErfMap, int]:
        """Probe, write the heatmap and return the map with its 0.95-mass radius."""
        model = self.probe_model(checkpoint, toy, with_head)
        samples = self.config.erf.samples if samples is None else samples
        size = self.config.erf.input_size if input_size is None else input_size
        m = compute_erf(model, size, samples, self.seed)
        write_heatmap(m, out, fmt)
        radius = -1 if m.degenerate else erf_radius(m)
        return m, radius

    # ----------------------------------------------------------------- checks

    def verify(self, suites: Optional[List[str]] = None) -> List[SuiteResult]:
        return run_suites(suites, seed=self.seed)

    @staticmethod
    def reference_config(preset: str = "desk") -> str:
        return preset_config(preset).to_json()


def _module_checkpoint(module: Module) -> Checkpoint:
    c = Checkpoint()
    c.update(module.state_dict().items())
    return c
