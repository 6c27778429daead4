import json
import os

import numpy as np
import pytest

from pcdlib.checkpoint import load_checkpoint
from pcdlib.config import parse_config_dict
from pcdlib.datastore import load_store
from pcdlib.erf import read_heatmap_csv
from pcdlib.exceptions import AlreadyAdaptedError, CheckpointError, ValidationError
from pcdlib.modelzoo import conv_kernel_paths, load_backbone
from pcdlib.session import EXPORTED_CHECKPOINT, METRICS_FILE, RAW_CHECKPOINT, PcdSession, checkpoint_digest
from pcdlib.trainer import read_metrics


@pytest.fixture
def session(tiny_config):
    return PcdSession(config=tiny_config)


@pytest.fixture
def workspace(session, tmp_path):
    data = str(tmp_path / "data")
    teacher = str(tmp_path / "teacher.pcd")
    session.gen_data(data)
    session.pretrain_teacher(data, teacher, random_init=True)
    return tmp_path, data, teacher


def test_seed_override(tiny_config):
    assert PcdSession(config=tiny_config, seed=9).seed == 9


def test_gen_data(session, tmp_path):
    assert session.gen_data(str(tmp_path / "d"), n=3, size=20) == 3
    store = load_store(str(tmp_path / "d"))
    assert store.images.shape == (3, 3, 20, 20)


class TestAdaptHead:
    def test_writes_map_kind_checkpoint(self, session, workspace):
        tmp_path, _, teacher = workspace
        out = str(tmp_path / "adapted.pcd")
        report = session.adapt_head(teacher, out, trials=8)
        assert report.passed
        adapted = load_checkpoint(out)
        assert adapted.metadata["head_kind"] == "map"
        assert adapted.metadata["seed_lineage"] == load_checkpoint(teacher).metadata["seed_lineage"]

    def test_twice_is_rejected(self, session, workspace):
        tmp_path, _, teacher = workspace
        out = str(tmp_path / "adapted.pcd")
        session.adapt_head(teacher, out, trials=4)
        with pytest.raises(AlreadyAdaptedError):
            session.adapt_head(out, str(tmp_path / "again.pcd"))
        assert not os.path.exists(tmp_path / "again.pcd")

    def test_needs_teacher(self, session, workspace):
        tmp_path, data, teacher = workspace
        session.distill(teacher, data, str(tmp_path / "run"))
        with pytest.raises(CheckpointError):
            session.adapt_head(str(tmp_path / "run" / RAW_CHECKPOINT), str(tmp_path / "x.pcd"))


class TestDistill:
    def test_outputs(self, session, workspace):
        tmp_path, data, teacher = workspace
        out = str(tmp_path / "run")
        result = session.distill(teacher, data, out)
        for name in (RAW_CHECKPOINT, EXPORTED_CHECKPOINT, METRICS_FILE):
            assert os.path.exists(os.path.join(out, name))
        assert len(read_metrics(os.path.join(out, METRICS_FILE))) == result.steps == 2

    def test_adapted_teacher_gives_same_run(self, session, workspace):
        tmp_path, data, teacher = workspace
        adapted = str(tmp_path / "adapted.pcd")
        session.adapt_head(teacher, adapted, trials=4)
        a = session.distill(teacher, data, str(tmp_path / "a"))
        b = session.distill(adapted, data, str(tmp_path / "b"))
        assert checkpoint_digest(a.raw) == checkpoint_digest(b.raw)

    def test_resume_appends_metrics(self, session, workspace):
        tmp_path, data, teacher = workspace
        out = str(tmp_path / "run")
        session.distill(teacher, data, out, stop_at=1)
        session.distill(teacher, data, out, resume=os.path.join(out, RAW_CHECKPOINT))
        assert [r.step for r in read_metrics(os.path.join(out, METRICS_FILE))] == [0, 1]

    def test_overrides(self, session, workspace):
        tmp_path, data, teacher = workspace
        session.distill(teacher, data, str(tmp_path / "run"), level="image", symmetric=False)
        assert session.config.loss.level == "image"
        assert session.config.loss.symmetric is False


def test_export_scales_kernels(session, workspace):
    tmp_path, data, teacher = workspace
    raw = os.path.join(str(tmp_path / "run"), RAW_CHECKPOINT)
    session.distill(teacher, data, str(tmp_path / "run"))
    plain = session.export(raw, str(tmp_path / "plain.pcd"), rescale=False)
    half = session.export(raw, str(tmp_path / "half.pcd"), anchor=0.5)
    assert half.metadata["norm_rescale_anchor"] == 0.5
    assert plain.metadata["norm_rescale_anchor"] is None
    kernels = set(conv_kernel_paths(load_backbone(plain)))
    for path in plain.paths():
        expected = plain[path] * np.float32(0.5) if path in kernels else plain[path]
        np.testing.assert_array_equal(half[path], expected)


class TestErf:
    def test_toy(self, session, tmp_path):
        out = str(tmp_path / "erf.csv")
        m, radius = session.erf(out, fmt="csv", toy="shallow", samples=2, input_size=9)
        assert 0 <= radius <= 3
        np.testing.assert_allclose(read_heatmap_csv(out), m.values, rtol=1e-5)

    def test_checkpoint_backbone(self, session, workspace):
        tmp_path, _, teacher = workspace
        m, _ = session.erf(str(tmp_path / "erf.pgm"), checkpoint=teacher, samples=1, input_size=16)
        assert m.shape == (16, 16)

    def test_source_required(self, session, tmp_path):
        with pytest.raises(ValidationError):
            session.erf(str(tmp_path / "erf.pgm"))

    def test_with_head_needs_student(self, session, workspace):
        tmp_path, _, teacher = workspace
        with pytest.raises(ValidationError):
            session.probe_model(checkpoint=teacher, with_head=True)


def test_reference_config():
    text = PcdSession.reference_config("desk")
    assert parse_config_dict(json.loads(text)).to_json() == text


def test_verify(session):
    results = session.verify(["checkpoint"])
    assert [r.name for r in results] == ["checkpoint"]
    assert results[0].passed
