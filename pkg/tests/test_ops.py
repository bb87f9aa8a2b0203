"""Forward behavior of the primitives against independent oracles."""

import math

import numpy as np
import pytest

from dfcnn.ops import (ConvSpec, bce_loss, concat_channels, concat_features, conv2d,
                       dense, flatten, global_avg_pool, maxpool2d, relu, sigmoid)
from dfcnn.tensor import ShapeError, Tensor

from oracles import conv2d_direct, maxpool_direct


def make_spec(k, dilation, cin, cout, rng, dtype=np.float64):
    return ConvSpec.init(k, dilation, cin, cout, rng, dtype=dtype)


class TestConv2d:
    def test_same_padding_preserves_shape(self):
        rng = np.random.default_rng(0)
        x = Tensor(rng.normal(size=(1, 8, 8, 3)).astype(np.float32))
        out = conv2d(x, make_spec(3, 1, 3, 4, rng, np.float32))
        assert out.shape == (1, 8, 8, 4)

    @pytest.mark.parametrize("k,dilation", [(1, 1), (3, 1), (3, 2), (5, 1), (5, 2)])
    def test_shape_law_all_kernels(self, k, dilation):
        rng = np.random.default_rng(k * 10 + dilation)
        x = Tensor(rng.normal(size=(2, 6, 7, 2)))
        out = conv2d(x, make_spec(k, dilation, 2, 3, rng))
        assert out.shape == (2, 6, 7, 3)

    def test_identity_kernel(self):
        x = Tensor(np.random.default_rng(1).normal(size=(1, 5, 5, 1)))
        spec = ConvSpec(kernel=1, dilation=1, in_channels=1, out_channels=1,
                        weights=Tensor.param(np.ones((1, 1, 1, 1))),
                        bias=Tensor.param(np.zeros(1)))
        out = conv2d(x, spec)
        np.testing.assert_array_equal(out.data, x.data)

    def test_matches_direct_loop_oracle(self):
        rng = np.random.default_rng(42)
        x = Tensor(rng.uniform(-1, 1, size=(1, 5, 5, 2)))
        spec = make_spec(3, 2, 2, 3, rng)
        got = conv2d(x, spec).data
        want = conv2d_direct(x.data, spec.weights.data, spec.bias.data, 2)
        np.testing.assert_allclose(got, want, atol=1e-6)

    def test_oracle_equivalence_randomized(self):
        # small-instance sweep over kernel/dilation/shape space
        rng = np.random.default_rng(7)
        for _ in range(60):
            n, h, w, c = (int(rng.integers(1, 4)), int(rng.integers(1, 7)),
                          int(rng.integers(1, 7)), int(rng.integers(1, 5)))
            k = int(rng.choice([1, 3, 5]))
            dilation = int(rng.integers(1, 3))
            o = int(rng.integers(1, 4))
            x = Tensor(rng.uniform(-1, 1, size=(n, h, w, c)))
            spec = make_spec(k, dilation, c, o, rng)
            want = conv2d_direct(x.data, spec.weights.data, spec.bias.data, dilation)
            np.testing.assert_allclose(conv2d(x, spec).data, want, atol=1e-12)

    def test_linearity_in_input_with_zero_bias(self):
        rng = np.random.default_rng(3)
        spec = make_spec(3, 1, 2, 2, rng)
        spec.bias.data[:] = 0
        x = Tensor(rng.normal(size=(1, 4, 4, 2)))
        z = Tensor(rng.normal(size=(1, 4, 4, 2)))
        a, b = 1.7, -0.3
        combo = conv2d(Tensor(a * x.data + b * z.data), spec).data
        parts = a * conv2d(x, spec).data + b * conv2d(z, spec).data
        np.testing.assert_allclose(combo, parts, atol=1e-12)

    def test_zero_input_channels_gives_pure_bias(self):
        rng = np.random.default_rng(4)
        spec = make_spec(3, 1, 0, 4, rng)
        spec.bias.data[:] = np.arange(4, dtype=np.float64)
        out = conv2d(Tensor(np.zeros((2, 4, 4, 0))), spec)
        assert out.shape == (2, 4, 4, 4)
        np.testing.assert_array_equal(out.data, np.broadcast_to(np.arange(4.0), out.shape))

    def test_channel_mismatch_raises(self):
        rng = np.random.default_rng(5)
        with pytest.raises(ShapeError):
            conv2d(Tensor(np.zeros((1, 4, 4, 3))), make_spec(3, 1, 2, 2, rng))

    def test_even_kernel_rejected(self):
        with pytest.raises(ValueError):
            ConvSpec(kernel=2, dilation=1, in_channels=1, out_channels=1,
                     weights=Tensor.param(np.zeros((2, 2, 1, 1))),
                     bias=Tensor.param(np.zeros(1)))


class TestMaxPool:
    def test_hand_enumerated_windows(self):
        x = Tensor(np.arange(1.0, 17.0).reshape(1, 4, 4, 1))
        out = maxpool2d(x, 2)
        np.testing.assert_array_equal(out.data.reshape(-1), [6, 8, 14, 16])

    def test_constant_tensor_stays_constant(self):
        x = Tensor(np.full((1, 6, 6, 2), 3.25))
        out = maxpool2d(x, 3)
        assert out.shape == (1, 2, 2, 2)
        np.testing.assert_array_equal(out.data, np.full((1, 2, 2, 2), 3.25))

    def test_identity_pooling(self):
        x = Tensor(np.random.default_rng(0).normal(size=(2, 3, 3, 2)))
        np.testing.assert_array_equal(maxpool2d(x, 1).data, x.data)

    def test_matches_direct_oracle(self):
        rng = np.random.default_rng(9)
        for m in (1, 2, 3):
            x = Tensor(rng.normal(size=(2, 6, 6, 3)))
            np.testing.assert_array_equal(maxpool2d(x, m).data, maxpool_direct(x.data, m))

    def test_commutes_with_monotone_map(self):
        rng = np.random.default_rng(11)
        x = Tensor(rng.normal(size=(1, 4, 4, 2)))
        g = lambda a: np.tanh(a) + 2 * a
        np.testing.assert_allclose(maxpool2d(Tensor(g(x.data)), 2).data,
                                   g(maxpool2d(x, 2).data), atol=1e-12)

    def test_indivisible_raises(self):
        with pytest.raises(ShapeError):
            maxpool2d(Tensor(np.zeros((1, 5, 4, 1))), 2)


class TestConcat:
    def test_channel_addition(self):
        a = Tensor(np.zeros((1, 4, 4, 2)))
        b = Tensor(np.zeros((1, 4, 4, 3)))
        assert concat_channels([a, b]).shape == (1, 4, 4, 5)

    def test_zero_channel_neutrality(self):
        empty = Tensor(np.zeros((1, 8, 8, 0)))
        b = Tensor(np.random.default_rng(0).normal(size=(1, 8, 8, 4)))
        out = concat_channels([empty, b])
        assert out.shape == (1, 8, 8, 4)
        np.testing.assert_array_equal(out.data, b.data)

    def test_slice_recovers_parts(self):
        rng = np.random.default_rng(1)
        parts = [Tensor(rng.normal(size=(2, 3, 3, c))) for c in (1, 4, 2)]
        out = concat_channels(parts).data
        offsets = [0, 1, 5, 7]
        for part, lo, hi in zip(parts, offsets, offsets[1:]):
            np.testing.assert_array_equal(out[..., lo:hi], part.data)

    def test_spatial_mismatch_raises(self):
        with pytest.raises(ShapeError):
            concat_channels([Tensor(np.zeros((1, 4, 4, 1))), Tensor(np.zeros((1, 5, 4, 1)))])


class TestDense:
    def test_identity_weights(self):
        x = Tensor(np.random.default_rng(0).normal(size=(3, 4)))
        out = dense(x, Tensor.param(np.eye(4)), Tensor.param(np.zeros(4)))
        np.testing.assert_allclose(out.data, x.data, atol=1e-15)

    def test_hand_arithmetic(self):
        x = Tensor(np.array([[1.0, 2.0]]))
        w = Tensor.param(np.array([[3.0], [4.0]]))
        b = Tensor.param(np.array([0.5]))
        assert dense(x, w, b).data[0, 0] == pytest.approx(11.5)

    def test_zero_input_gives_bias(self):
        b = np.array([1.0, -2.0, 0.25])
        out = dense(Tensor(np.zeros((2, 5))), Tensor.param(np.ones((5, 3))), Tensor.param(b))
        np.testing.assert_array_equal(out.data, np.tile(b, (2, 1)))

    def test_width_mismatch_raises(self):
        with pytest.raises(ShapeError):
            dense(Tensor(np.zeros((1, 3))), Tensor.param(np.zeros((4, 2))),
                  Tensor.param(np.zeros(2)))


class TestActivationsAndLoss:
    def test_relu_values(self):
        out = relu(Tensor(np.array([[-1.0, 2.0, 0.0]])))
        np.testing.assert_array_equal(out.data, [[0.0, 2.0, 0.0]])

    def test_sigmoid_values(self):
        out = sigmoid(Tensor(np.array([0.0, math.log(3.0)])))
        np.testing.assert_allclose(out.data, [0.5, 0.75], atol=1e-12)

    def test_bce_perfect_prediction(self):
        p = Tensor(np.array([[1.0], [0.0]]))
        loss = bce_loss(p, np.array([[1.0], [0.0]]))
        assert 0 < float(loss.data) <= -math.log(1 - 1e-7) + 1e-12

    def test_bce_coin_flip_is_ln2(self):
        p = Tensor(np.full((4, 1), 0.5))
        loss = bce_loss(p, np.array([[1.0], [0.0], [1.0], [1.0]]))
        assert float(loss.data) == pytest.approx(math.log(2.0), abs=1e-12)

    def test_bce_mean_of_two(self):
        def single(p, t):
            return float(bce_loss(Tensor(np.array([[p]])), np.array([[t]])).data)
        a = single(0.8, 1.0)
        b = single(0.3, 0.0)
        both = float(bce_loss(Tensor(np.array([[0.8], [0.3]])),
                              np.array([[1.0], [0.0]])).data)
        assert both == pytest.approx((a + b) / 2, rel=1e-12)

    def test_bce_rejects_bad_labels(self):
        with pytest.raises(ValueError):
            bce_loss(Tensor(np.array([[0.5]])), np.array([[0.5]]))


class TestShapesMisc:
    def test_flatten_row_major(self):
        x = Tensor(np.arange(24.0).reshape(1, 2, 3, 4))
        np.testing.assert_array_equal(flatten(x).data, np.arange(24.0).reshape(1, 24))

    def test_global_avg_pool(self):
        x = Tensor(np.random.default_rng(0).normal(size=(2, 4, 4, 3)))
        np.testing.assert_allclose(global_avg_pool(x).data, x.data.mean(axis=(1, 2)),
                                   atol=1e-12)

    def test_concat_features(self):
        a = Tensor(np.ones((2, 3)))
        b = Tensor(np.zeros((2, 2)))
        out = concat_features([a, b])
        assert out.shape == (2, 5)
        np.testing.assert_array_equal(out.data[:, 3:], 0)
