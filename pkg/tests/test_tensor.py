import numpy as np
import pytest

from pcdlib.exceptions import DomainError, GradientError, ShapeError, ValidationError
from pcdlib.rng import RngStreams, SplitMix64, derive_seed
from pcdlib.tensor import (
    Tape,
    Tensor,
    backward,
    bmm,
    concat,
    create,
    double_precision,
    exp,
    finite_diff_check,
    getitem,
    log,
    logsumexp,
    matmul,
    no_grad,
    reduce,
    relu,
    reshape,
    softmax,
    transpose,
)


class TestSplitMix64:
    def test_reference_first_output(self):
        # splitmix64 seeded with 0
        assert int(SplitMix64(0).next_uint64(1)[0]) == 0xE220A8397B1DCDAF

    def test_counter_based(self):
        a = SplitMix64(7)
        first = a.uniform(3)
        rest = a.uniform(2)
        b = SplitMix64(7).uniform(5)
        np.testing.assert_array_equal(np.concatenate([first, rest]), b)

    def test_uniform_range(self):
        u = SplitMix64(3).uniform(10000)
        assert u.min() >= 0.0 and u.max() < 1.0
        assert abs(u.mean() - 0.5) < 0.02

    def test_gaussian_moments(self):
        g = SplitMix64(5).gaussian(20001)
        assert g.shape == (20001,)
        assert abs(g.mean()) < 0.05
        assert abs(g.std() - 1.0) < 0.05

    def test_integers_exclusive_high(self):
        ints = SplitMix64(9).integers(2, 5, 1000)
        assert set(ints.tolist()) == {2, 3, 4}

    def test_permutation(self):
        p = SplitMix64(11).permutation(20)
        assert sorted(p.tolist()) == list(range(20))

    def test_derived_streams_are_independent_of_draw_order(self):
        streams = RngStreams(42)
        streams.derive("other").uniform(100)
        a = streams.derive("augment", 3, 1).uniform(4)
        b = RngStreams(42).derive("augment", 3, 1).uniform(4)
        np.testing.assert_array_equal(a, b)

    def test_derive_seed_separates_keys(self):
        assert derive_seed(0, "augment", 1) != derive_seed(0, "augment", 2)
        assert derive_seed(0, "augment", 1) != derive_seed(1, "augment", 1)

    def test_derive_seed_accepts_any_64_bit_seed(self):
        assert derive_seed(2**64 - 1, "data") == derive_seed(-1, "data")
        assert derive_seed(2**63, "data") == derive_seed(-(2**63), "data")
        assert derive_seed(2**63 + 5, "data") != derive_seed(5, "data")


class TestCreate:
    def test_fills(self):
        assert np.all(create([2, 3], "zeros").numpy() == 0)
        assert np.all(create([2, 3], "ones").numpy() == 1)
        u = create([4, 4], "uniform", seed=1).numpy()
        assert u.dtype == np.float32 and u.min() >= 0 and u.max() < 1

    def test_gaussian_is_seeded(self):
        a = create([8], "gaussian", seed=3, std=2.0).numpy()
        b = create([8], "gaussian", seed=3, std=2.0).numpy()
        np.testing.assert_array_equal(a, b)

    def test_rejects_empty_and_zero_dims(self):
        with pytest.raises(ShapeError):
            create([], "zeros")
        with pytest.raises(ShapeError):
            create([2, 0], "zeros")

    def test_unknown_init(self):
        with pytest.raises(ValidationError):
            create([2], "laplace")


class TestElementwise:
    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            Tensor(np.ones((2, 3))) + Tensor(np.ones((3, 2)))

    def test_scalar_operand(self):
        x = Tensor([1.0, 2.0], requires_grad=True)
        y = reduce("sum", x * 3.0 + 1.0)
        backward(y)
        np.testing.assert_allclose(x.grad, [3.0, 3.0])

    def test_log_domain(self):
        with pytest.raises(DomainError):
            log(Tensor([1.0, 0.0]))

    def test_relu_gradient_is_zero_at_zero(self):
        x = Tensor([-1.0, 0.0, 2.0], requires_grad=True)
        backward(reduce("sum", relu(x)))
        np.testing.assert_array_equal(x.grad, [0.0, 0.0, 1.0])

    def test_exp_log_gradients(self):
        x = create([5], "uniform", seed=2)
        x.data += 0.5
        assert finite_diff_check(lambda t: reduce("sum", log(exp(t) * t)), x) < 1e-5


class TestLinearAlgebra:
    def test_matmul_shapes(self):
        with pytest.raises(ShapeError):
            matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))

    def test_matmul_gradient(self):
        b = create([3, 2], "gaussian", seed=4)
        x = create([2, 3], "gaussian", seed=5)
        assert finite_diff_check(lambda t: reduce("sum", matmul(t, b)), x) < 1e-5

    def test_bmm(self):
        a = create([2, 3, 4], "gaussian", seed=6)
        b = create([2, 4, 5], "gaussian", seed=7)
        out = bmm(a, b)
        np.testing.assert_allclose(out.numpy(), np.matmul(a.numpy(), b.numpy()), rtol=1e-5, atol=1e-5)
        assert finite_diff_check(lambda t: reduce("sum", bmm(t, b)), a) < 1e-5


class TestReductions:
    def test_empty_axes_copy(self):
        x = Tensor(np.arange(4.0).reshape(2, 2), requires_grad=True)
        out = reduce("sum", x, axes=())
        np.testing.assert_array_equal(out.numpy(), x.numpy())
        assert out.numpy() is not x.numpy()

    def test_full_reduction_is_zero_dim(self):
        x = Tensor(np.arange(6.0).reshape(2, 3), requires_grad=True)
        for op in ("sum", "mean", "max"):
            assert reduce(op, x).shape == ()
        backward(reduce("sum", x))
        np.testing.assert_array_equal(x.grad, np.ones((2, 3)))

    def test_mean_and_sum(self):
        x = Tensor(np.arange(6.0).reshape(2, 3))
        np.testing.assert_allclose(reduce("sum", x, 1).numpy(), [3.0, 12.0])
        np.testing.assert_allclose(reduce("mean", x, 0).numpy(), [1.5, 2.5, 3.5])

    def test_max_routes_to_first_maximum(self):
        x = Tensor([[1.0, 3.0, 3.0], [2.0, 0.0, 2.0]], requires_grad=True)
        backward(reduce("sum", reduce("max", x, 1)))
        np.testing.assert_array_equal(x.grad, [[0.0, 1.0, 0.0], [1.0, 0.0, 0.0]])

    def test_bad_axis(self):
        with pytest.raises(ShapeError):
            reduce("sum", Tensor(np.ones((2, 2))), 2)

    def test_unknown_op(self):
        with pytest.raises(ValidationError):
            reduce("median", Tensor(np.ones(3)))

    def test_logsumexp_is_stable(self):
        x = Tensor([1000.0, 1000.0])
        assert logsumexp(x).item() == pytest.approx(1000.0 + np.log(2.0), rel=1e-6)

    def test_softmax_gradient(self):
        w = create([2, 4], "gaussian", seed=8)
        x = create([2, 4], "gaussian", seed=9)
        assert finite_diff_check(lambda t: reduce("sum", softmax(t, 1) * w), x) < 1e-5


class TestShapes:
    def test_reshape_rejects_bad_size(self):
        with pytest.raises(ShapeError):
            reshape(Tensor(np.ones(6)), (4, 2))

    def test_transpose_rejects_non_permutation(self):
        with pytest.raises(ShapeError):
            transpose(Tensor(np.ones((2, 3))), (0, 0))

    def test_concat_gradient(self):
        a = Tensor(np.ones((2, 2)), requires_grad=True)
        b = Tensor(np.ones((1, 2)), requires_grad=True)
        out = concat([a, b], axis=0)
        assert out.shape == (3, 2)
        backward(reduce("sum", out * 2.0))
        np.testing.assert_array_equal(a.grad, np.full((2, 2), 2.0))
        np.testing.assert_array_equal(b.grad, np.full((1, 2), 2.0))

    def test_getitem_rejects_advanced_indexing(self):
        with pytest.raises(ValidationError):
            getitem(Tensor(np.ones(4)), [0, 1])


class TestBackward:
    def test_non_scalar_loss(self):
        x = Tensor(np.ones(3), requires_grad=True)
        with pytest.raises(GradientError):
            backward(x * 2.0)

    def test_loss_without_graph(self):
        with pytest.raises(GradientError):
            backward(Tensor(1.0))

    def test_grads_accumulate(self):
        x = Tensor([2.0], requires_grad=True)
        backward(reduce("sum", x * x))
        backward(reduce("sum", x * x))
        np.testing.assert_allclose(x.grad, [8.0])

    def test_shared_subexpression(self):
        x = Tensor([3.0], requires_grad=True)
        y = x * x
        backward(reduce("sum", y + y))
        np.testing.assert_allclose(x.grad, [12.0])

    def test_no_grad_records_nothing(self):
        x = Tensor([1.0], requires_grad=True)
        with no_grad():
            y = x * 2.0
        assert not y.requires_grad
        assert y._node is None

    def test_tape_replay_is_bit_exact(self):
        x = create([3, 4], "gaussian", seed=10, requires_grad=True)
        w = create([4, 2], "gaussian", seed=11)
        loss = reduce("mean", relu(matmul(x, w)))
        tape = Tape.of(loss)
        assert len(tape) == 3
        assert tape.replay() == []


class TestPrecision:
    def test_float32_by_default(self):
        assert Tensor([1.0]).numpy().dtype == np.float32

    def test_double_precision_context(self):
        with double_precision():
            assert Tensor([1.0]).numpy().dtype == np.float64
        assert Tensor([1.0]).numpy().dtype == np.float32

    def test_finite_diff_rejects_bad_eps(self):
        with pytest.raises(ValidationError):
            finite_diff_check(lambda t: reduce("sum", t), Tensor([1.0]), eps=0.0)
