import numpy as np
import pytest

from pcdlib.erf import (
    ErfMap,
    StudentOutput,
    ToyNet,
    compute_erf,
    erf_radius,
    read_heatmap_csv,
    receptive_field,
    toy_model,
    write_heatmap,
)
from pcdlib.exceptions import ValidationError
from pcdlib.modelzoo import BackboneSpec, Student, StudentSpec
from pcdlib.nn import Conv2d
from pcdlib.rng import SplitMix64


def single_conv():
    return ToyNet(Conv2d(3, 4, 3, 1, 1, rng=SplitMix64(5)))


def symmetrized(model):
    """Make every kernel left-right symmetric."""
    for layer in model:
        if isinstance(layer, Conv2d):
            k = layer.kernel.data
            layer.kernel.data = (0.5 * (k + k[..., ::-1])).astype(k.dtype)
    return model


class TestComputeErf:
    def test_single_conv_support(self):
        m = compute_erf(single_conv(), 9, n_samples=2)
        assert m.center == (4, 4)
        assert m.values.max() == pytest.approx(1.0)
        support = np.zeros((9, 9), dtype=bool)
        support[3:6, 3:6] = True
        assert np.all(m.values[~support] == 0.0)
        assert np.all(m.values[support] > 0.0)
        assert erf_radius(m, mass=1.0) == 1

    def test_even_size_center_ties_low(self):
        assert compute_erf(single_conv(), 8, n_samples=1).center == (3, 3)

    def test_shallow_stack_stays_in_receptive_field(self):
        model = toy_model("shallow", seed=1)
        assert receptive_field(model) == 7
        m = compute_erf(model, 15, n_samples=4)
        outside = np.ones((15, 15), dtype=bool)
        outside[4:11, 4:11] = False
        assert np.all(m.values[outside] == 0.0)
        assert erf_radius(m, mass=1.0) <= 3

    def test_deeper_stack_reaches_further(self):
        assert receptive_field(toy_model("deep")) == 13
        shallow = compute_erf(toy_model("shallow", seed=1), 17, n_samples=8)
        deep = compute_erf(toy_model("deep", seed=1), 17, n_samples=8)
        assert np.count_nonzero(deep.values) > np.count_nonzero(shallow.values)

    def test_attention_reaches_corners(self):
        m = compute_erf(toy_model("mhsa", seed=2), 12, n_samples=2)
        assert min(m.corners()) > 0.0

    def test_plain_cnn_student_misses_corners_attention_student_reaches_them(self):
        plain = BackboneSpec(8, [[1, 8, 1], [1, 8, 1], [1, 8, 1]])
        corners = {}
        for enhancer in ("none", "mhsa"):
            spec = StudentSpec(plain, hidden=16, out_dim=8, enhancer=enhancer, heads=2, head_dim=4)
            m = compute_erf(StudentOutput(Student(spec, seed=7)), 25, n_samples=4)
            corners[enhancer] = m.corners()
        # stem + 3 blocks: receptive field 15 around the center of 25
        assert corners["none"] == [0.0, 0.0, 0.0, 0.0]
        assert min(corners["mhsa"]) > 0.0

    def test_linear_symmetric_kernels_give_mirror_symmetric_map(self):
        model = symmetrized(ToyNet(Conv2d(3, 4, 3, 1, 1, rng=SplitMix64(2)), Conv2d(4, 4, 3, 1, 1, rng=SplitMix64(3))))
        m = compute_erf(model, 15, n_samples=2)
        np.testing.assert_allclose(m.values, m.values[:, ::-1], atol=1e-6)

    def test_symmetric_relu_stack_is_balanced(self):
        model = symmetrized(toy_model("shallow", seed=4))
        m = compute_erf(model, 15, n_samples=128)
        left, right = m.values[:, :7].sum(), m.values[:, 8:].sum()
        assert abs(left - right) <= 0.2 * max(left, right)

    def test_radius_settles_with_sample_count(self):
        model = toy_model("deep", seed=3)
        r64 = erf_radius(compute_erf(model, 21, n_samples=64))
        r128 = erf_radius(compute_erf(model, 21, n_samples=128))
        assert abs(r64 - r128) <= 1

    def test_degenerate_map(self):
        model = single_conv()
        model[0].kernel.data[...] = 0.0
        m = compute_erf(model, 7, n_samples=1)
        assert m.degenerate
        assert np.all(m.values == 0.0)
        with pytest.raises(ValidationError):
            erf_radius(m)

    def test_mode_restored(self):
        model = toy_model("shallow")
        model.train()
        compute_erf(model, 9, n_samples=1)
        assert model.training
        model.eval()
        compute_erf(model, 9, n_samples=1)
        assert not model.training

    def test_deterministic(self):
        a = compute_erf(toy_model("shallow"), 11, n_samples=3, seed=4)
        b = compute_erf(toy_model("shallow"), 11, n_samples=3, seed=4)
        np.testing.assert_array_equal(a.values, b.values)

    def test_needs_samples(self):
        with pytest.raises(ValidationError):
            compute_erf(single_conv(), 9, n_samples=0)

    def test_student_output(self):
        spec = StudentSpec(BackboneSpec(8, [[1, 8, 2], [1, 16, 2]]), hidden=16, out_dim=8, heads=2, head_dim=4)
        m = compute_erf(StudentOutput(Student(spec, seed=3)), 16, n_samples=1)
        assert m.shape == (16, 16)
        assert m.center == (1, 1)
        assert not m.degenerate


class TestRadius:
    def test_point(self):
        values = np.zeros((5, 5))
        values[2, 2] = 1.0
        assert erf_radius(ErfMap(values, (2, 2))) == 0

    def test_uniform(self):
        assert erf_radius(ErfMap(np.ones((5, 5)), (2, 2)), mass=1.0) == 2

    def test_window_follows_support(self):
        values = np.zeros((9, 9))
        values[0:3, 0:3] = 1.0
        assert erf_radius(ErfMap(values, (4, 4)), mass=1.0) == 1

    def test_mass_range(self):
        with pytest.raises(ValidationError):
            erf_radius(ErfMap(np.ones((3, 3)), (1, 1)), mass=0.0)


def test_toy_model_unknown():
    with pytest.raises(ValidationError):
        toy_model("wide")


class TestHeatmap:
    def test_pgm(self, tmp_path):
        values = np.array([[0.0, 0.5, 1.0], [0.25, 0.75, 1.0]])
        path = tmp_path / "erf.pgm"
        write_heatmap(ErfMap(values, (0, 1)), str(path))
        data = path.read_bytes()
        header = b"P5\n3 2\n255\n"
        assert data.startswith(header)
        assert list(data[len(header):]) == [0, 128, 255, 64, 191, 255]

    def test_csv(self, tmp_path):
        values = np.array([[0.123456789, 1.0], [0.0, 0.5]])
        path = tmp_path / "erf.csv"
        write_heatmap(ErfMap(values, (0, 0)), str(path), fmt="csv")
        np.testing.assert_allclose(read_heatmap_csv(str(path)), values, rtol=1e-5)

    def test_unknown_format(self, tmp_path):
        with pytest.raises(ValidationError):
            write_heatmap(ErfMap(np.ones((2, 2)), (0, 0)), str(tmp_path / "x"), fmt="png")

    def test_unwritable(self, tmp_path):
        with pytest.raises(ValidationError):
            write_heatmap(ErfMap(np.ones((2, 2)), (0, 0)), str(tmp_path / "missing" / "x.pgm"))


@pytest.mark.slow
def test_deeper_radius_is_not_smaller_across_seeds():
    for seed in range(5):
        shallow = compute_erf(toy_model("shallow", seed=seed), 25, n_samples=32, seed=seed)
        deep = compute_erf(toy_model("deep", seed=seed), 25, n_samples=32, seed=seed)
        assert erf_radius(deep) >= erf_radius(shallow)
