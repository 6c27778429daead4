import numpy as np
import pytest

from pcdlib.adaptor import (
    MAP,
    VECTOR,
    HeadSpec,
    adapt_head,
    drop_trailing_bn,
    fc_to_conv1x1,
    fuse_conv_bn,
    fuse_fc_bn,
    verify_invariance,
)
from pcdlib.exceptions import AdaptationError, AlreadyAdaptedError, ShapeError
from pcdlib.nn import BatchNorm, Conv2d, Linear, ReLU
from pcdlib.nn import functional as F
from pcdlib.rng import SplitMix64
from pcdlib.tensor import Tensor
from pcdlib.verify import random_vector_head

from conftest import gaussian


def stats(bn, rng):
    bn.set_running_stats(rng.gaussian(bn.channels), 0.5 + rng.uniform(bn.channels))
    if bn.affine:
        bn.gamma.data = (1.0 + 0.3 * rng.gaussian(bn.channels)).astype(np.float32)
        bn.beta.data = rng.gaussian(bn.channels).astype(np.float32)
    return bn.eval()


def pretraining_head(rng, with_last_bn=True):
    layers = [
        Linear(8, 16, bias=False, rng=rng),
        stats(BatchNorm(16, layout=VECTOR), rng),
        ReLU(),
        Linear(16, 4, bias=False, rng=rng),
    ]
    if with_last_bn:
        layers.append(stats(BatchNorm(4, affine=False, layout=VECTOR), rng))
    return HeadSpec(*layers).eval()


class TestAdaptHead:
    def test_layer_kinds(self, rng):
        adapted = adapt_head(pretraining_head(rng))
        assert adapted.input_kind == MAP
        assert adapted.layer_kinds == ["conv1x1", "bn", "cw_relu", "conv1x1", "bn"]

    def test_invariance_holds(self, rng):
        head = pretraining_head(rng)
        report = verify_invariance(head, adapt_head(head), trials=8, seed=3)
        assert report.passed
        assert report.max_abs_dev < 1e-9

    def test_invariance_with_trailing_bn_dropped(self, rng):
        head = pretraining_head(rng)
        adapted = adapt_head(head, drop_trailing_affine_free_bn=True)
        assert adapted.layer_kinds == ["conv1x1", "bn", "cw_relu", "conv1x1"]
        report = verify_invariance(head, adapted, trials=8, drop_trailing_affine_free_bn=True)
        assert report.passed

    def test_original_is_untouched(self, rng):
        head = pretraining_head(rng)
        before = head.state_dict()
        adapt_head(head, drop_trailing_affine_free_bn=True)
        assert len(head) == 5
        for path, array in head.state_dict().items():
            np.testing.assert_array_equal(array, before[path])

    def test_random_heads(self):
        for i in range(20):
            head = random_vector_head(SplitMix64(100 + i))
            assert verify_invariance(head, adapt_head(head), trials=4, seed=i).passed

    def test_plain_relu_variant_is_not_invariant(self, rng):
        head = HeadSpec(Linear(4, 4, rng=rng), ReLU(), Linear(4, 2, rng=rng))
        report = verify_invariance(head, adapt_head(head, activation="relu"), trials=16)
        assert not report.passed

    def test_already_adapted(self, rng):
        adapted = adapt_head(pretraining_head(rng))
        with pytest.raises(AlreadyAdaptedError):
            adapt_head(adapted)

    def test_grammar(self, rng):
        head = HeadSpec(Conv2d(4, 4, 3, padding=1), input_kind=VECTOR)
        with pytest.raises(AdaptationError):
            adapt_head(head)

    def test_dims_must_chain(self, rng):
        head = HeadSpec(Linear(4, 8, rng=rng), Linear(6, 2, rng=rng))
        with pytest.raises(ShapeError):
            adapt_head(head)

    def test_empty_head(self):
        with pytest.raises(AdaptationError):
            adapt_head(HeadSpec())

    def test_description_round_trip(self, rng):
        head = pretraining_head(rng)
        rebuilt = HeadSpec.from_description(head.describe())
        assert rebuilt.layer_kinds == head.layer_kinds
        assert rebuilt.input_kind == VECTOR


class TestHelpers:
    def test_fc_to_conv1x1(self, rng):
        fc = Linear(3, 5, rng=rng)
        fc.bias.data = rng.gaussian(5).astype(np.float32)
        conv = fc_to_conv1x1(fc)
        x = gaussian(rng, 2, 3)
        out = conv(Tensor(x.reshape(2, 3, 1, 1))).numpy().reshape(2, 5)
        np.testing.assert_allclose(out, fc(Tensor(x)).numpy(), rtol=1e-6, atol=1e-6)

    def test_drop_trailing_bn_only_when_affine_free(self, rng):
        assert len(drop_trailing_bn(pretraining_head(rng))) == 4
        head = HeadSpec(Linear(4, 4, rng=rng), stats(BatchNorm(4, layout=VECTOR), rng))
        assert len(drop_trailing_bn(head)) == 2

    def test_fuse_fc_bn(self, rng):
        fc = Linear(4, 3, rng=rng)
        bn = stats(BatchNorm(3, layout=VECTOR), rng)
        x = Tensor(gaussian(rng, 5, 4))
        np.testing.assert_allclose(fuse_fc_bn(fc, bn)(x).numpy(), bn(fc(x)).numpy(), rtol=1e-5, atol=1e-5)

    def test_fuse_conv_bn(self, rng):
        conv = Conv2d(2, 3, 3, padding=1, rng=rng)
        bn = stats(BatchNorm(3), rng)
        x = Tensor(gaussian(rng, 1, 2, 4, 4))
        np.testing.assert_allclose(fuse_conv_bn(conv, bn)(x).numpy(), bn(conv(x)).numpy(), rtol=1e-4, atol=1e-4)

    def test_fuse_needs_inference_bn(self, rng):
        with pytest.raises(AdaptationError):
            fuse_fc_bn(Linear(2, 2, rng=rng), BatchNorm(2, layout=VECTOR))

    def test_pool_commutes_through_adapted_head(self, rng):
        head = pretraining_head(rng)
        adapted = adapt_head(head)
        x = Tensor(gaussian(rng, 3, 8, 5, 5))
        lhs = head(F.global_avg_pool(x)).numpy()
        rhs = F.global_avg_pool(adapted(x)).numpy()
        np.testing.assert_allclose(lhs, rhs, rtol=1e-4, atol=1e-4)
