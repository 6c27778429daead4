import math

import numpy as np
import pytest

from pcdlib.distillation import (
    LossConfig,
    MemoryQueue,
    distillation_loss,
    gradient_uniformity_check,
    image_level_loss,
    normalize_rows,
    pcd_loss,
    pixel_cosine,
    pixel_infonce,
    symmetric_loss,
)
from pcdlib.exceptions import DomainError, ShapeError, ValidationError
from pcdlib.tensor import Tensor, backward, double_precision, finite_diff_check
from pcdlib.verify import brute_force_pcd

from conftest import gaussian


class TestMemoryQueue:
    def test_fifo_eviction(self):
        q = MemoryQueue(3, 2)
        for i in range(5):
            q.push(np.array([[1.0, float(i)]]))
        assert len(q) == 3
        expected = normalize_rows(np.array([[1.0, 2.0], [1.0, 3.0], [1.0, 4.0]])).astype(np.float32)
        np.testing.assert_allclose(q.snapshot(), expected, rtol=1e-7)

    def test_entries_are_unit_norm(self, rng):
        q = MemoryQueue(8, 4)
        q.push(gaussian(rng, 5, 4) * 10)
        np.testing.assert_allclose(np.linalg.norm(q.snapshot(), axis=1), 1.0, rtol=1e-6)

    def test_maps_are_pooled(self, rng):
        q = MemoryQueue(4, 3)
        t = gaussian(rng, 2, 3, 2, 2)
        q.push(t)
        np.testing.assert_allclose(q.snapshot(), normalize_rows(t.mean(axis=(2, 3))), rtol=1e-6)

    def test_oversized_push_keeps_newest(self, rng):
        q = MemoryQueue(2, 3)
        keys = gaussian(rng, 5, 3)
        q.push(keys)
        np.testing.assert_allclose(q.snapshot(), normalize_rows(keys[-2:]), rtol=1e-6)

    def test_wrong_dim(self):
        with pytest.raises(ShapeError):
            MemoryQueue(4, 3).push(np.ones((1, 2)))

    def test_load_restores_order(self, rng):
        q = MemoryQueue(3, 2)
        for i in range(4):
            q.push(np.array([[float(i) + 1.0, 1.0]]))
        restored = MemoryQueue(3, 2)
        restored.load(q.snapshot())
        np.testing.assert_array_equal(restored.snapshot(), q.snapshot())
        q.push(np.array([[0.0, 1.0]]))
        restored.push(np.array([[0.0, 1.0]]))
        np.testing.assert_array_equal(restored.snapshot(), q.snapshot())

    def test_rejects_bad_capacity(self):
        with pytest.raises(ValidationError):
            MemoryQueue(0, 4)


class TestPixelLoss:
    def test_matches_brute_force(self, rng):
        with double_precision():
            s = gaussian(rng, 2, 5, 3, 3)
            t = gaussian(rng, 2, 5, 3, 3)
            negatives = normalize_rows(gaussian(rng, 6, 5))
            got = pcd_loss(Tensor(s), t, negatives, LossConfig(tau=0.2)).item()
        assert got == pytest.approx(brute_force_pcd(s, t, negatives, 0.2), abs=1e-9)

    def test_analytic_two_dim_case(self):
        with double_precision():
            one = np.array([1.0, 0.0]).reshape(1, 2, 1, 1)
            loss = pcd_loss(Tensor(one), one, np.array([[0.0, 1.0]]), LossConfig(tau=0.2)).item()
        assert loss == pytest.approx(math.log1p(math.exp(-5.0)), abs=1e-7)

    def test_no_negatives_gives_zero(self, rng):
        s = gaussian(rng, 1, 3, 2, 2)
        loss = pcd_loss(Tensor(s), gaussian(rng, 1, 3, 2, 2), None, LossConfig())
        assert loss.item() == pytest.approx(0.0, abs=1e-6)

    def test_scale_invariant(self, rng):
        s = gaussian(rng, 1, 4, 2, 2)
        t = gaussian(rng, 1, 4, 2, 2)
        negs = normalize_rows(gaussian(rng, 3, 4))
        a = pcd_loss(Tensor(s), t, negs, LossConfig()).item()
        b = pcd_loss(Tensor(3.0 * s), 0.5 * t, negs, LossConfig()).item()
        assert a == pytest.approx(b, rel=1e-5)

    def test_teacher_is_resized(self, rng):
        s = Tensor(gaussian(rng, 1, 3, 4, 4), requires_grad=True)
        loss = pcd_loss(s, gaussian(rng, 1, 3, 2, 2), normalize_rows(gaussian(rng, 2, 3)), LossConfig())
        backward(loss)
        assert s.grad.shape == (1, 3, 4, 4)

    def test_channel_mismatch(self, rng):
        with pytest.raises(ShapeError):
            pcd_loss(Tensor(gaussian(rng, 1, 3, 2, 2)), gaussian(rng, 1, 4, 2, 2), None, LossConfig())

    def test_tau_domain(self, rng):
        s = Tensor(gaussian(rng, 1, 3, 2, 2))
        with pytest.raises(DomainError):
            pcd_loss(s, gaussian(rng, 1, 3, 2, 2), None, LossConfig(tau=0.0))

    def test_gradient(self, rng):
        t = gaussian(rng, 1, 4, 2, 2)
        negs = normalize_rows(gaussian(rng, 3, 4))
        x = Tensor(gaussian(rng, 1, 4, 2, 2))
        assert finite_diff_check(lambda s: pcd_loss(s, t, negs, LossConfig()), x) < 1e-3

    def test_single_pixel_infonce(self):
        with double_precision():
            loss = pixel_infonce(Tensor([1.0, 0.0]), np.array([1.0, 0.0]), [np.array([0.0, 1.0])], 0.2).item()
        assert loss == pytest.approx(math.log1p(math.exp(-5.0)), abs=1e-7)

    def test_extra_negative_never_lowers_loss(self, rng):
        with double_precision():
            for _ in range(20):
                s = Tensor(gaussian(rng, 4))
                t = gaussian(rng, 4)
                negs = list(normalize_rows(gaussian(rng, 5, 4)))
                losses = [pixel_infonce(s, t, negs[:k], 0.2).item() for k in range(len(negs) + 1)]
                assert all(b >= a for a, b in zip(losses, losses[1:]))

    @pytest.mark.parametrize("k", [1, 4, 16])
    def test_equal_logits_give_log_one_plus_k(self, k):
        with double_precision():
            loss = pixel_infonce(Tensor([0.6, 0.8]), np.array([0.6, 0.8]), [np.array([0.6, 0.8])] * k, 0.2).item()
        assert loss == pytest.approx(math.log(1 + k), abs=1e-9)

    def test_pixel_permutation_invariant(self, rng):
        s = gaussian(rng, 2, 4, 3, 3)
        t = gaussian(rng, 2, 4, 3, 3)
        negs = normalize_rows(gaussian(rng, 5, 4))
        perm = np.array([4, 0, 8, 2, 6, 1, 7, 3, 5])

        def shuffled(x):
            return x.reshape(2, 4, 9)[:, :, perm].reshape(2, 4, 3, 3)

        with double_precision():
            a = pcd_loss(Tensor(s), t, negs, LossConfig()).item()
            b = pcd_loss(Tensor(shuffled(s)), shuffled(t), negs, LossConfig()).item()
        assert a == pytest.approx(b, abs=1e-12)

    def test_one_by_one_map_equals_image_level(self, rng):
        s = gaussian(rng, 2, 4, 1, 1)
        t = gaussian(rng, 2, 4, 1, 1)
        negs = normalize_rows(gaussian(rng, 3, 4))
        pixel = pcd_loss(Tensor(s), t, negs, LossConfig()).item()
        image = image_level_loss(Tensor(s), t, negs, LossConfig(level="image")).item()
        assert pixel == pytest.approx(image, rel=1e-5)


def _identity_student(view):
    return None, view * 2.0


def _channel_flip_teacher(view):
    return Tensor(view.numpy()[:, ::-1])


class TestSymmetricLoss:
    @pytest.fixture
    def views(self, rng):
        return Tensor(gaussian(rng, 2, 4, 3, 3)), Tensor(gaussian(rng, 2, 4, 3, 3))

    @pytest.fixture
    def negatives(self, rng):
        return normalize_rows(gaussian(rng, 6, 4))

    def _loss(self, a, b, negatives, symmetric):
        cfg = LossConfig(symmetric=symmetric)
        return symmetric_loss(a, b, _identity_student, _channel_flip_teacher, negatives, cfg)

    def test_identical_views_give_single_view_loss(self, views, negatives):
        a, _ = views
        both = self._loss(a, a, negatives, symmetric=True)
        one = self._loss(a, None, negatives, symmetric=False)
        assert both.loss.item() == pytest.approx(one.loss.item(), rel=1e-6)
        assert len(both.keys) == 2
        assert len(one.keys) == 1

    def test_swapping_views_keeps_loss(self, views, negatives):
        a, b = views
        ab = self._loss(a, b, negatives, symmetric=True)
        ba = self._loss(b, a, negatives, symmetric=True)
        assert ab.loss.item() == pytest.approx(ba.loss.item(), rel=1e-6)
        assert ab.pixel_cosine == pytest.approx(ba.pixel_cosine, rel=1e-6)

    def test_asymmetric_uses_first_view(self, views, negatives):
        a, b = views
        one = self._loss(a, b, negatives, symmetric=False)
        single = pcd_loss(a * 2.0, _channel_flip_teacher(a), negatives, LossConfig())
        assert one.loss.item() == pytest.approx(single.item(), rel=1e-6)


class TestDispatchAndMetrics:
    def test_unknown_level(self, rng):
        with pytest.raises(ValidationError):
            distillation_loss(Tensor(gaussian(rng, 1, 2, 1, 1)), gaussian(rng, 1, 2, 1, 1), None, LossConfig(level="patch"))

    def test_config_validation(self):
        with pytest.raises(ValidationError):
            LossConfig(tau=-1.0).validate()
        with pytest.raises(ValidationError):
            LossConfig(enqueue="none").validate()

    def test_pixel_cosine_of_identical_maps(self, rng):
        s = gaussian(rng, 2, 3, 2, 2)
        assert pixel_cosine(s, 2.0 * s) == pytest.approx(1.0)


class TestGradientUniformity:
    def test_image_level_gradient_is_uniform(self):
        with double_precision():
            report = gradient_uniformity_check("image", seed=1)
        assert report.uniform(1e-6)

    def test_pixel_level_gradient_is_not(self):
        with double_precision():
            report = gradient_uniformity_check("pixel", seed=1)
        assert not report.uniform(1e-6)
        assert report.relative_deviation > 1e-2

    def test_unknown_kind(self):
        with pytest.raises(ValidationError):
            gradient_uniformity_check("patch")
