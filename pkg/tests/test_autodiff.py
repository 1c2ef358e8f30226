"""Unit tests for the tensor core: values against naive loop oracles,
gradients against the finite-difference harness."""

import numpy as np
import pytest

from fewshot_attention import autodiff as ad
from fewshot_attention import gradcheck
from fewshot_attention.errors import ContractError, DegenerateBatchError, DimensionError


# ---------------------------------------------------------------------------
# independent oracles (naive loops, float64)
# ---------------------------------------------------------------------------

def conv2d_oracle(x, kernel, bias):
    """Six nested loops over batch, output channel, and spatial/tap dims."""
    bsz, cin, h, w = x.shape
    cout, _, k, _ = kernel.shape
    pad = k // 2
    out = np.zeros((bsz, cout, h, w), dtype=np.float64)
    for b in range(bsz):
        for o in range(cout):
            for y in range(h):
                for xx in range(w):
                    acc = float(bias[o])
                    for c in range(cin):
                        for dy in range(k):
                            for dx in range(k):
                                sy, sx = y + dy - pad, xx + dx - pad
                                if 0 <= sy < h and 0 <= sx < w:
                                    acc += float(x[b, c, sy, sx]) * float(kernel[o, c, dy, dx])
                    out[b, o, y, xx] = acc
    return out


def spp_oracle(x, levels):
    """Per-cell max with explicit floor bin edges."""
    bsz, c, h, w = x.shape
    out = []
    for b in range(bsz):
        row = []
        for level in levels:
            for ch in range(c):
                for i in range(level):
                    for j in range(level):
                        r0, r1 = (i * h) // level, ((i + 1) * h) // level
                        c0, c1 = (j * w) // level, ((j + 1) * w) // level
                        best = -np.inf
                        for y in range(r0, r1):
                            for xx in range(c0, c1):
                                best = max(best, float(x[b, ch, y, xx]))
                        row.append(best)
        out.append(row)
    return np.asarray(out, dtype=np.float64)


def channel_scale_oracle(feature, weights):
    c, h, w = feature.shape
    out = np.empty_like(feature)
    for ch in range(c):
        for y in range(h):
            for x in range(w):
                out[ch, y, x] = feature[ch, y, x] * weights[ch]
    return out


def broadcast_mul_oracle(feature, mask):
    c, h, w = feature.shape
    out = np.empty_like(feature)
    for ch in range(c):
        for y in range(h):
            for x in range(w):
                out[ch, y, x] = feature[ch, y, x] * mask[0, y, x]
    return out


def _t(arr, grad=False):
    return ad.Tensor(np.asarray(arr), requires_grad=grad)


# ---------------------------------------------------------------------------
# conv2d
# ---------------------------------------------------------------------------

class TestConv2d:
    def test_identity_kernel(self):
        """A center-tap kernel must pass the input through unchanged."""
        x = _t(np.ones((1, 1, 3, 3), dtype=np.float32))
        k = np.zeros((1, 1, 3, 3), dtype=np.float32)
        k[0, 0, 1, 1] = 1.0
        out = ad.conv2d(x, _t(k), _t(np.zeros(1, dtype=np.float32)))
        np.testing.assert_array_equal(out.data, x.data)

    def test_matches_loop_oracle(self):
        rng = np.random.default_rng(0)
        for _ in range(5):
            x = rng.standard_normal((2, 4, 5, 5))
            k = rng.standard_normal((3, 4, 3, 3))
            b = rng.standard_normal(3)
            out = ad.conv2d(_t(x), _t(k), _t(b))
            np.testing.assert_allclose(out.data, conv2d_oracle(x, k, b), atol=1e-6)

    def test_unbatched_input(self):
        rng = np.random.default_rng(1)
        x = rng.standard_normal((2, 4, 4))
        k = rng.standard_normal((3, 2, 3, 3))
        b = rng.standard_normal(3)
        out = ad.conv2d(_t(x), _t(k), _t(b))
        assert out.shape == (3, 4, 4)
        np.testing.assert_allclose(out.data, conv2d_oracle(x[None], k, b)[0], atol=1e-6)

    def test_channel_mismatch(self):
        with pytest.raises(DimensionError):
            ad.conv2d(_t(np.zeros((1, 2, 4, 4))), _t(np.zeros((3, 4, 3, 3))),
                      _t(np.zeros(3)))

    def test_gradients(self):
        assert gradcheck.check_op("conv2d", seed=3) < 1e-4


# ---------------------------------------------------------------------------
# maxpool2
# ---------------------------------------------------------------------------

class TestMaxpool2:
    def test_single_window(self):
        x = _t(np.array([[[[1.0, 2.0], [3.0, 4.0]]]]))
        out = ad.maxpool2(x)
        assert out.shape == (1, 1, 1, 1)
        assert out.item() == 4.0

    def test_spatial_chain_84(self):
        """Three pools: 84 -> 42 -> 21 -> 10 (odd tail dropped)."""
        x = ad.Tensor(np.zeros((1, 1, 84, 84), dtype=np.float32))
        for expected in (42, 21, 10):
            x = ad.maxpool2(x)
            assert x.shape[-1] == expected

    def test_odd_tail_dropped(self):
        x = _t(np.arange(15.0).reshape(1, 1, 3, 5))
        assert ad.maxpool2(x).shape == (1, 1, 1, 2)

    def test_too_small(self):
        with pytest.raises(DimensionError):
            ad.maxpool2(_t(np.zeros((1, 1, 1, 4))))

    def test_tie_routes_to_first(self):
        """Equal window entries send all gradient to the row-major first."""
        x = _t(np.ones((1, 1, 2, 2), dtype=np.float64), grad=True)
        ad.backward(ad.sum_all(ad.maxpool2(x)))
        np.testing.assert_array_equal(x.grad[0, 0], [[1.0, 0.0], [0.0, 0.0]])

    def test_gradients(self):
        assert gradcheck.check_op("maxpool2", seed=3) < 1e-4


# ---------------------------------------------------------------------------
# batchnorm
# ---------------------------------------------------------------------------

class TestBatchnorm:
    def test_training_normalizes(self):
        rng = np.random.default_rng(2)
        x = _t(rng.normal(3.0, 2.0, size=(4, 3, 5, 5)).astype(np.float32))
        state = ad.BatchNormState.create(3)
        out = ad.batchnorm(x, state, training=True)
        mean = out.data.mean(axis=(0, 2, 3))
        var = out.data.var(axis=(0, 2, 3))
        np.testing.assert_allclose(mean, 0.0, atol=1e-5)
        np.testing.assert_allclose(var, 1.0, atol=1e-4)

    def test_training_updates_running_stats(self):
        rng = np.random.default_rng(3)
        x = _t(rng.normal(5.0, 1.0, size=(4, 2, 4, 4)).astype(np.float32))
        state = ad.BatchNormState.create(2)
        ad.batchnorm(x, state, training=True)
        assert np.all(state.running_mean > 0.2)
        assert not np.allclose(state.running_var, 1.0)

    def test_eval_identity_with_unit_stats(self):
        rng = np.random.default_rng(4)
        x = _t(rng.standard_normal((2, 3, 4, 4)).astype(np.float32))
        state = ad.BatchNormState.create(3)
        out = ad.batchnorm(x, state, training=False)
        # epsilon shrinks values by sqrt(1/(1+eps)) only
        np.testing.assert_allclose(out.data, x.data, atol=1e-4)

    def test_degenerate_batch(self):
        state = ad.BatchNormState.create(3)
        with pytest.raises(DegenerateBatchError):
            ad.batchnorm(_t(np.zeros((1, 3, 1, 1))), state, training=True)

    def test_gradients(self):
        assert gradcheck.check_op("batchnorm_train", seed=3) < 1e-4
        assert gradcheck.check_op("batchnorm_eval", seed=3) < 1e-4


# ---------------------------------------------------------------------------
# elementwise
# ---------------------------------------------------------------------------

class TestElementwise:
    def test_relu_values(self):
        out = ad.relu(_t(np.array([-1.0, 0.0, 2.0])))
        np.testing.assert_array_equal(out.data, [0.0, 0.0, 2.0])

    def test_relu_subgradient_zero_at_zero(self):
        x = _t(np.array([-1.0, 0.0, 2.0]), grad=True)
        ad.backward(ad.sum_all(ad.relu(x)))
        np.testing.assert_array_equal(x.grad, [0.0, 0.0, 1.0])

    def test_sigmoid_at_zero(self):
        assert ad.sigmoid(_t(np.array([0.0]))).item() == pytest.approx(0.5)

    def test_sigmoid_gradient_closed_form(self):
        x = _t(np.array([1.0]), grad=True)
        ad.backward(ad.sum_all(ad.sigmoid(x)))
        s = 1.0 / (1.0 + np.exp(-1.0))
        assert abs(x.grad[0] - s * (1 - s)) / (s * (1 - s)) < 1e-6
        assert gradcheck.check_op("sigmoid", seed=3) < 1e-6


# ---------------------------------------------------------------------------
# linear
# ---------------------------------------------------------------------------

class TestLinear:
    def test_identity(self):
        x = _t(np.arange(6.0).reshape(2, 3))
        out = ad.linear(x, _t(np.eye(3)), _t(np.zeros(3)))
        np.testing.assert_array_equal(out.data, x.data)

    def test_hand_arithmetic(self):
        out = ad.linear(_t(np.array([[1.0, 2.0]])), _t(np.array([[3.0, 4.0]])),
                        _t(np.array([5.0])))
        assert out.data[0, 0] == 16.0

    def test_dimension_mismatch(self):
        with pytest.raises(DimensionError):
            ad.linear(_t(np.zeros((2, 3))), _t(np.zeros((4, 5))), _t(np.zeros(4)))

    def test_gradients(self):
        assert gradcheck.check_op("linear", seed=3) < 1e-4


# ---------------------------------------------------------------------------
# pooling reductions
# ---------------------------------------------------------------------------

class TestGlobalAvgPool:
    def test_constant_map(self):
        out = ad.global_avg_pool(_t(np.full((2, 3, 4, 4), 2.5)))
        np.testing.assert_allclose(out.data, 2.5)

    def test_hand_arithmetic(self):
        x = _t(np.array([[[0.0, 2.0], [4.0, 6.0]]]))
        assert ad.global_avg_pool(x).data[0] == pytest.approx(3.0)

    def test_flat_summation_oracle(self, rng):
        x = rng.standard_normal((2, 3, 5, 7))
        out = ad.global_avg_pool(_t(x))
        expected = np.array([[sum(x[b, c].reshape(-1)) / 35.0 for c in range(3)]
                             for b in range(2)])
        np.testing.assert_allclose(out.data, expected, atol=1e-6)

    def test_gradients(self):
        assert gradcheck.check_op("global_avg_pool", seed=3) < 1e-4


class TestSpatialPyramidPool:
    def test_level_one_is_global_max(self, rng):
        x = rng.standard_normal((2, 3, 6, 7))
        out = ad.spatial_pyramid_pool(_t(x), [1])
        np.testing.assert_allclose(out.data, x.max(axis=(2, 3)), atol=0)

    @pytest.mark.parametrize("hw", [10, 3])
    def test_output_length_64_channels(self, hw, rng):
        x = rng.standard_normal((1, 64, hw, hw))
        out = ad.spatial_pyramid_pool(_t(x), [1, 2, 3])
        assert out.shape == (1, 896)

    def test_hand_enumeration(self):
        x = _t(np.array([[[[1.0, 2.0], [3.0, 4.0]]]]))
        out = ad.spatial_pyramid_pool(x, [1, 2])
        np.testing.assert_array_equal(out.data[0], [4.0, 1.0, 2.0, 3.0, 4.0])

    def test_level_exceeds_dims(self):
        with pytest.raises(DimensionError):
            ad.spatial_pyramid_pool(_t(np.zeros((1, 2, 2, 2))), [1, 3])

    def test_length_independent_of_spatial_dims(self, rng):
        """Output length depends only on C and the levels."""
        lengths = set()
        for _ in range(10):
            h, w = rng.integers(3, 16, size=2)
            x = rng.standard_normal((1, 5, h, w))
            lengths.add(ad.spatial_pyramid_pool(_t(x), [1, 2, 3]).shape[1])
        assert lengths == {5 * 14}

    def test_matches_loop_oracle(self, rng):
        for _ in range(5):
            h, w = rng.integers(3, 10, size=2)
            x = rng.standard_normal((2, 3, h, w))
            out = ad.spatial_pyramid_pool(_t(x), [1, 2, 3])
            np.testing.assert_allclose(out.data, spp_oracle(x, [1, 2, 3]), atol=1e-6)

    def test_gradients(self):
        assert gradcheck.check_op("spatial_pyramid_pool", seed=3) < 1e-4


# ---------------------------------------------------------------------------
# feature combination ops
# ---------------------------------------------------------------------------

class TestChannelScale:
    def test_unit_weights_bit_identical(self, rng):
        f = rng.standard_normal((4, 3, 3)).astype(np.float32)
        out = ad.channel_scale(_t(f), _t(np.ones(4, dtype=np.float32)))
        assert np.array_equal(out.data, f)

    def test_zero_weights(self, rng):
        f = rng.standard_normal((4, 3, 3)).astype(np.float32)
        out = ad.channel_scale(_t(f), _t(np.zeros(4, dtype=np.float32)))
        assert np.all(out.data == 0.0)

    def test_matches_loop_oracle(self, rng):
        f = rng.standard_normal((5, 4, 3)).astype(np.float32)
        w = rng.standard_normal(5).astype(np.float32)
        out = ad.channel_scale(_t(f), _t(w))
        assert np.array_equal(out.data, channel_scale_oracle(f, w))

    def test_length_mismatch(self):
        with pytest.raises(DimensionError):
            ad.channel_scale(_t(np.zeros((4, 2, 2))), _t(np.zeros(3)))

    def test_gradients(self):
        assert gradcheck.check_op("channel_scale", seed=3) < 1e-4


class TestBroadcastMul:
    def test_unit_mask_bit_identical(self, rng):
        f = rng.standard_normal((4, 3, 3)).astype(np.float32)
        out = ad.broadcast_mul(_t(f), _t(np.ones((1, 3, 3), dtype=np.float32)))
        assert np.array_equal(out.data, f)

    def test_zero_mask(self, rng):
        f = rng.standard_normal((4, 3, 3)).astype(np.float32)
        out = ad.broadcast_mul(_t(f), _t(np.zeros((1, 3, 3), dtype=np.float32)))
        assert np.all(out.data == 0.0)

    def test_matches_loop_oracle(self, rng):
        f = rng.standard_normal((5, 4, 3)).astype(np.float32)
        m = rng.standard_normal((1, 4, 3)).astype(np.float32)
        out = ad.broadcast_mul(_t(f), _t(m))
        assert np.array_equal(out.data, broadcast_mul_oracle(f, m))

    def test_mask_gradient_sums_over_channels(self):
        f = np.arange(12.0).reshape(3, 2, 2)
        mask = ad.Tensor(np.ones((1, 2, 2)), requires_grad=True)
        ad.backward(ad.sum_all(ad.broadcast_mul(_t(f), mask)))
        np.testing.assert_allclose(mask.grad[0], f.sum(axis=0))

    def test_spatial_mismatch(self):
        with pytest.raises(DimensionError):
            ad.broadcast_mul(_t(np.zeros((4, 2, 2))), _t(np.zeros((1, 3, 3))))

    def test_gradients(self):
        assert gradcheck.check_op("broadcast_mul", seed=3) < 1e-4


# ---------------------------------------------------------------------------
# loss
# ---------------------------------------------------------------------------

class TestSoftmaxCrossEntropy:
    def test_uniform_logits(self):
        logits = _t(np.zeros((3, 5)))
        loss = ad.softmax_cross_entropy(logits, [0, 2, 4])
        assert loss.item() == pytest.approx(np.log(5.0), rel=1e-6)

    def test_shift_invariance(self, rng):
        z = rng.standard_normal((4, 6))
        targets = rng.integers(0, 6, size=4)
        base = ad.softmax_cross_entropy(_t(z), targets).item()
        shifted = ad.softmax_cross_entropy(_t(z + rng.standard_normal((4, 1))), targets).item()
        assert abs(base - shifted) < 1e-6

    def test_gradient_closed_form(self, rng):
        z = rng.standard_normal((4, 5))
        targets = np.array([1, 0, 3, 2])
        logits = ad.Tensor(z, requires_grad=True)
        ad.backward(ad.softmax_cross_entropy(logits, targets))
        ez = np.exp(z - z.max(axis=1, keepdims=True))
        probs = ez / ez.sum(axis=1, keepdims=True)
        probs[np.arange(4), targets] -= 1.0
        np.testing.assert_allclose(logits.grad, probs / 4.0, atol=1e-6)
        assert gradcheck.check_op("softmax_cross_entropy", seed=3) < 1e-4

    def test_target_out_of_range(self):
        with pytest.raises(IndexError):
            ad.softmax_cross_entropy(_t(np.zeros((2, 3))), [0, 3])


# ---------------------------------------------------------------------------
# backward mechanics
# ---------------------------------------------------------------------------

class TestBackward:
    def test_sum_gives_ones(self):
        x = ad.Tensor(np.zeros((3, 4)), requires_grad=True)
        ad.backward(x.sum())
        np.testing.assert_array_equal(x.grad, np.ones((3, 4)))

    def test_double_backward_doubles_exactly(self, rng):
        x = ad.Tensor(rng.standard_normal((4, 4)), requires_grad=True)
        w = ad.Tensor(rng.standard_normal((4, 4)), requires_grad=True)
        loss = ad.sum_all(ad.mul(ad.sigmoid(x), w))
        ad.backward(loss)
        gx, gw = x.grad.copy(), w.grad.copy()
        ad.backward(loss)
        np.testing.assert_array_equal(x.grad, 2.0 * gx)
        np.testing.assert_array_equal(w.grad, 2.0 * gw)

    def test_nonscalar_loss_rejected(self):
        x = ad.Tensor(np.zeros((2, 2)), requires_grad=True)
        with pytest.raises(ContractError):
            ad.backward(ad.relu(x))

    def test_no_grad_suppresses_graph(self):
        x = ad.Tensor(np.ones((2, 2)), requires_grad=True)
        with ad.no_grad():
            out = ad.relu(x)
        assert not out.requires_grad and out._parents == ()

    def test_grad_accumulates_into_intermediates(self):
        x = ad.Tensor(np.ones(3), requires_grad=True)
        y = ad.scale(x, 2.0)
        ad.backward(ad.sum_all(y))
        np.testing.assert_array_equal(y.grad, np.ones(3))
        np.testing.assert_array_equal(x.grad, 2.0 * np.ones(3))


class TestGlueOps:
    def test_add_shape_mismatch(self):
        with pytest.raises(DimensionError):
            ad.add(_t(np.zeros(3)), _t(np.zeros(4)))

    def test_concat_and_split_gradients(self, rng):
        a = ad.Tensor(rng.standard_normal((2, 3)), requires_grad=True)
        b = ad.Tensor(rng.standard_normal((4, 3)), requires_grad=True)
        out = ad.concat([a, b], axis=0)
        assert out.shape == (6, 3)
        ad.backward(ad.sum_all(out))
        np.testing.assert_array_equal(a.grad, np.ones((2, 3)))
        np.testing.assert_array_equal(b.grad, np.ones((4, 3)))

    def test_index_select_repeats_accumulate(self):
        x = ad.Tensor(np.ones((3, 2)), requires_grad=True)
        out = ad.index_select0(x, [0, 0, 2])
        ad.backward(ad.sum_all(out))
        np.testing.assert_array_equal(x.grad, [[2.0, 2.0], [0.0, 0.0], [1.0, 1.0]])

    def test_reshape_roundtrip_gradient(self, rng):
        x = ad.Tensor(rng.standard_normal((2, 6)), requires_grad=True)
        ad.backward(ad.sum_all(ad.reshape(x, (3, 4))))
        np.testing.assert_array_equal(x.grad, np.ones((2, 6)))
