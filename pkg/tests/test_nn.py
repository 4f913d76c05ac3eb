"""Kernel-level tests: forward examples, finite-difference gradients, SGD."""

import numpy as np
import pytest

from slimnet.nn import (
    BNParams,
    BatchNorm2d,
    Conv2d,
    ConvParams,
    GlobalAvgPool,
    Linear,
    MaxPool2d,
    ReLU,
    batchnorm_backward,
    batchnorm_forward,
    conv2d_backward,
    conv2d_forward,
    conv2d_forward_reference,
    global_avg_pool_backward,
    global_avg_pool_forward,
    gradient_check,
    linear_forward,
    maxpool2d_forward,
    relu_backward,
    relu_forward,
    sgd_step,
    softmax_cross_entropy,
)


def loop_conv2d(x, weights, bias, stride, padding):
    """Independent six-nested-loop convolution oracle (float64 accumulation)."""
    n, cin, h, w = x.shape
    cout, _, kh, kw = weights.shape
    oh = (h + 2 * padding - kh) // stride + 1
    ow = (w + 2 * padding - kw) // stride + 1
    out = np.zeros((n, cout, oh, ow), dtype=x.dtype)
    for b in range(n):
        for oc in range(cout):
            for oy in range(oh):
                for ox in range(ow):
                    acc = float(bias[oc])
                    for ic in range(cin):
                        for ky in range(kh):
                            for kx in range(kw):
                                iy = oy * stride + ky - padding
                                ix = ox * stride + kx - padding
                                if 0 <= iy < h and 0 <= ix < w:
                                    acc += float(x[b, ic, iy, ix]) * float(weights[oc, ic, ky, kx])
                    out[b, oc, oy, ox] = acc
    return out


def make_conv(rng, cin, cout, k, stride=1, padding=0, dtype=np.float64):
    weights = rng.standard_normal((cout, cin, k, k)).astype(dtype)
    bias = rng.standard_normal(cout).astype(dtype)
    return ConvParams(weights, bias, stride=stride, padding=padding)


def make_bn(rng, channels, dtype=np.float64):
    return BNParams(
        scale=rng.uniform(0.5, 1.5, channels).astype(dtype),
        shift=rng.standard_normal(channels).astype(dtype),
        running_mean=np.zeros(channels, dtype),
        running_var=np.ones(channels, dtype),
    )


class TestConvForward:
    def test_single_multiply_accumulate(self):
        params = ConvParams(np.array([[[[3.0]]]]), np.array([0.5]))
        out = conv2d_forward(np.array([[[[2.0]]]]), params)
        assert out.shape == (1, 1, 1, 1)
        assert out[0, 0, 0, 0] == pytest.approx(6.5)

    def test_identity_kernel(self):
        rng = np.random.default_rng(0)
        x = rng.standard_normal((2, 1, 5, 5))
        w = np.zeros((1, 1, 3, 3))
        w[0, 0, 1, 1] = 1.0
        out = conv2d_forward(x, ConvParams(w, np.zeros(1), padding=1))
        np.testing.assert_allclose(out, x, rtol=0, atol=1e-12)

    def test_matches_loop_oracle(self):
        rng = np.random.default_rng(7)
        x = rng.standard_normal((1, 2, 4, 4))
        params = make_conv(rng, 2, 3, 3, padding=1)
        expected = loop_conv2d(x, params.weights, params.bias, 1, 1)
        np.testing.assert_allclose(conv2d_forward(x, params), expected, rtol=1e-12)

    @pytest.mark.parametrize("stride,padding", [(1, 0), (1, 1), (2, 1), (3, 0)])
    def test_reference_kernel_bitwise_vs_oracle(self, stride, padding):
        rng = np.random.default_rng(stride * 10 + padding)
        size = 5 if stride != 3 else 6
        x = rng.standard_normal((2, 2, size, size))
        params = make_conv(rng, 2, 3, 3, stride=stride, padding=padding)
        got = conv2d_forward_reference(x, params)
        expected = loop_conv2d(x, params.weights, params.bias, stride, padding)
        assert np.array_equal(got, expected)

    def test_im2col_agrees_with_reference_float32(self):
        rng = np.random.default_rng(11)
        for trial in range(5):
            x = rng.standard_normal((2, 3, 6, 6)).astype(np.float32)
            params = make_conv(rng, 3, 4, 3, padding=1, dtype=np.float32)
            fast = conv2d_forward(x, params)
            ref = conv2d_forward_reference(x, params)
            denom = np.maximum(np.abs(ref), 1e-3)
            assert np.max(np.abs(fast - ref) / denom) < 1e-4

    def test_channel_mismatch_raises(self):
        params = make_conv(np.random.default_rng(0), 2, 3, 3)
        with pytest.raises(ValueError, match="channels"):
            conv2d_forward(np.zeros((1, 3, 5, 5)), params)

    def test_non_integral_output_extent_raises(self):
        params = make_conv(np.random.default_rng(0), 1, 1, 2, stride=2)
        with pytest.raises(ValueError, match="non-integral"):
            conv2d_forward(np.zeros((1, 1, 5, 5)), params)

    def test_outputs_finite(self):
        rng = np.random.default_rng(3)
        x = rng.standard_normal((2, 2, 6, 6)).astype(np.float32)
        out = conv2d_forward(x, make_conv(rng, 2, 4, 3, padding=1, dtype=np.float32))
        assert np.all(np.isfinite(out))


class TestConvBackward:
    def test_zero_grad_out_gives_zero_grads(self):
        rng = np.random.default_rng(1)
        x = rng.standard_normal((1, 2, 4, 4))
        params = make_conv(rng, 2, 3, 3, padding=1)
        gx, gw, gb = conv2d_backward(x, params, np.zeros((1, 3, 4, 4)))
        assert not gx.any() and not gw.any() and not gb.any()

    def test_scalar_chain_rule(self):
        params = ConvParams(np.array([[[[3.0]]]]), np.array([0.5]))
        x = np.array([[[[2.0]]]])
        gx, gw, gb = conv2d_backward(x, params, np.array([[[[1.5]]]]))
        assert gw[0, 0, 0, 0] == pytest.approx(2.0 * 1.5)
        assert gx[0, 0, 0, 0] == pytest.approx(3.0 * 1.5)
        assert gb[0] == pytest.approx(1.5)

    def test_linearity_in_grad_out(self):
        rng = np.random.default_rng(2)
        x = rng.standard_normal((1, 2, 4, 4))
        params = make_conv(rng, 2, 3, 3, padding=1)
        g = rng.standard_normal((1, 3, 4, 4))
        gx1, gw1, gb1 = conv2d_backward(x, params, g)
        gx2, gw2, gb2 = conv2d_backward(x, params, 2.0 * g)
        np.testing.assert_allclose(gx2, 2.0 * gx1, rtol=1e-12)
        np.testing.assert_allclose(gw2, 2.0 * gw1, rtol=1e-12)
        np.testing.assert_allclose(gb2, 2.0 * gb1, rtol=1e-12)

    def test_shape_mismatch_raises(self):
        rng = np.random.default_rng(0)
        x = rng.standard_normal((1, 2, 4, 4))
        params = make_conv(rng, 2, 3, 3, padding=1)
        with pytest.raises(ValueError, match="grad_out"):
            conv2d_backward(x, params, np.zeros((1, 3, 5, 5)))

    @pytest.mark.parametrize("seed", [0, 1, 2])
    def test_finite_difference(self, seed):
        rng = np.random.default_rng(seed)
        layer = Conv2d(make_conv(rng, 2, 3, 3, stride=1, padding=1))
        x = rng.standard_normal((2, 2, 5, 5))
        assert gradient_check(layer, x, seed=seed) < 1e-5

    def test_finite_difference_strided(self):
        rng = np.random.default_rng(9)
        layer = Conv2d(make_conv(rng, 2, 3, 3, stride=2, padding=1))
        x = rng.standard_normal((1, 2, 5, 5))
        assert gradient_check(layer, x, seed=9) < 1e-5


class TestBatchNorm:
    def test_eval_direct_substitution(self):
        bn = BNParams(
            scale=np.array([1.0]),
            shift=np.array([0.0]),
            running_mean=np.array([1.0]),
            running_var=np.array([4.0]),
            eps=1e-12,
        )
        out, cache = batchnorm_forward(np.full((1, 1, 1, 1), 3.0), bn, mode="eval")
        assert cache is None
        assert out[0, 0, 0, 0] == pytest.approx(1.0, abs=1e-9)

    def test_identity_normalization(self):
        rng = np.random.default_rng(4)
        x = rng.standard_normal((8, 3, 6, 6))
        x -= x.mean(axis=(0, 2, 3), keepdims=True)
        x /= x.std(axis=(0, 2, 3), keepdims=True)
        bn = BNParams(np.ones(3), np.zeros(3), np.zeros(3), np.ones(3), eps=1e-12)
        out, _ = batchnorm_forward(x, bn, mode="train")
        np.testing.assert_allclose(out, x, atol=1e-6)

    def test_train_mode_hand_formula(self):
        # One channel, values {2, 4, 6}: batch mean 4, biased variance 8/3.
        x = np.array([2.0, 4.0, 6.0]).reshape(3, 1, 1, 1)
        bn = BNParams(np.array([2.0]), np.array([1.0]), np.zeros(1), np.ones(1), eps=1e-5)
        out, _ = batchnorm_forward(x, bn, mode="train")
        inv = 1.0 / np.sqrt(8.0 / 3.0 + bn.eps)
        expected = [2.0 * (v - 4.0) * inv + 1.0 for v in (2.0, 4.0, 6.0)]
        np.testing.assert_allclose(out.ravel(), expected, rtol=1e-12)

    def test_train_mode_output_statistics(self):
        rng = np.random.default_rng(5)
        x = rng.standard_normal((4, 3, 5, 5)) * 3.0 + 1.5
        bn = make_bn(rng, 3)
        out, _ = batchnorm_forward(x, bn, mode="train")
        mean = out.mean(axis=(0, 2, 3))
        var = out.var(axis=(0, 2, 3))
        batch_var = x.var(axis=(0, 2, 3))
        np.testing.assert_allclose(mean, bn.shift, atol=1e-6)
        np.testing.assert_allclose(var, bn.scale**2 * batch_var / (batch_var + bn.eps), atol=1e-6)

    def test_running_stats_updated(self):
        rng = np.random.default_rng(6)
        x = rng.standard_normal((4, 2, 4, 4)) + 5.0
        bn = make_bn(rng, 2)
        batchnorm_forward(x, bn, mode="train")
        np.testing.assert_allclose(bn.running_mean, bn.momentum * x.mean(axis=(0, 2, 3)), rtol=1e-12)

    def test_channel_mismatch_raises(self):
        bn = make_bn(np.random.default_rng(0), 3)
        with pytest.raises(ValueError, match="channels"):
            batchnorm_forward(np.zeros((2, 2, 4, 4)), bn, mode="train")

    def test_degenerate_batch_raises(self):
        bn = make_bn(np.random.default_rng(0), 2)
        with pytest.raises(ValueError, match=">= 2"):
            batchnorm_forward(np.zeros((1, 2, 1, 1)), bn, mode="train")

    def test_negative_running_var_rejected(self):
        with pytest.raises(ValueError, match="running_var"):
            BNParams(np.ones(2), np.zeros(2), np.zeros(2), np.array([1.0, -0.1]))

    @pytest.mark.parametrize("seed", [0, 1, 2])
    def test_finite_difference(self, seed):
        rng = np.random.default_rng(seed)
        layer = BatchNorm2d(make_bn(rng, 3))
        x = rng.standard_normal((3, 3, 4, 4))
        assert gradient_check(layer, x, seed=seed) < 1e-5

    def test_l1_sign_rule(self):
        bn = BNParams(np.array([-0.5]), np.array([0.0]), np.zeros(1), np.ones(1))
        _, cache = batchnorm_forward(np.random.default_rng(0).standard_normal((4, 1, 2, 2)), bn, "train")
        _, grad_scale, _ = batchnorm_backward(cache, np.zeros((4, 1, 2, 2)), l1_coeff=0.1)
        assert grad_scale[0] == pytest.approx(-0.1)

    def test_l1_subgradient_zero_at_zero(self):
        bn = BNParams(np.array([0.0]), np.array([0.0]), np.zeros(1), np.ones(1))
        _, cache = batchnorm_forward(np.random.default_rng(0).standard_normal((4, 1, 2, 2)), bn, "train")
        _, grad_scale, _ = batchnorm_backward(cache, np.zeros((4, 1, 2, 2)), l1_coeff=0.7)
        assert grad_scale[0] == 0.0


class TestReLU:
    def test_definition(self):
        np.testing.assert_array_equal(relu_forward(np.array([-1.0, 0.0, 2.0])), [0.0, 0.0, 2.0])

    def test_all_positive_identity(self):
        x = np.array([0.5, 1.0, 3.0])
        np.testing.assert_array_equal(relu_forward(x), x)

    def test_idempotent(self):
        rng = np.random.default_rng(8)
        x = rng.standard_normal(100)
        np.testing.assert_array_equal(relu_forward(relu_forward(x)), relu_forward(x))

    def test_backward_masks_negative(self):
        x = np.array([-2.0, 3.0])
        np.testing.assert_array_equal(relu_backward(x, np.array([5.0, 5.0])), [0.0, 5.0])

    @pytest.mark.parametrize("seed", [0, 1])
    def test_finite_difference_away_from_zero(self, seed):
        rng = np.random.default_rng(seed)
        x = rng.standard_normal((2, 2, 4, 4))
        x += 0.1 * np.sign(x)  # keep entries away from the kink
        assert gradient_check(ReLU(), x, seed=seed) < 1e-5


class TestPooling:
    def test_maxpool_values(self):
        x = np.arange(16, dtype=float).reshape(1, 1, 4, 4)
        out, _ = maxpool2d_forward(x, 2)
        np.testing.assert_array_equal(out[0, 0], [[5.0, 7.0], [13.0, 15.0]])

    def test_maxpool_divisibility_error(self):
        with pytest.raises(ValueError, match="divisible"):
            maxpool2d_forward(np.zeros((1, 1, 5, 4)), 2)

    def test_maxpool_tie_break_deterministic(self):
        layer = MaxPool2d(2)
        x = np.ones((1, 1, 2, 2))
        layer.forward(x, train=True)
        grad = layer.backward(np.array([[[[1.0]]]]))
        np.testing.assert_array_equal(grad[0, 0], [[1.0, 0.0], [0.0, 0.0]])

    @pytest.mark.parametrize("seed", [0, 1])
    def test_maxpool_finite_difference(self, seed):
        rng = np.random.default_rng(seed)
        x = rng.standard_normal((2, 2, 4, 4))
        assert gradient_check(MaxPool2d(2), x, seed=seed) < 1e-5

    def test_global_avg_pool(self):
        x = np.arange(8, dtype=float).reshape(1, 2, 2, 2)
        out, _ = global_avg_pool_forward(x)
        np.testing.assert_allclose(out, [[1.5, 5.5]])

    def test_global_avg_pool_backward_spreads(self):
        _, cache = global_avg_pool_forward(np.zeros((1, 1, 2, 2)))
        grad = global_avg_pool_backward(cache, np.array([[4.0]]))
        np.testing.assert_allclose(grad, np.ones((1, 1, 2, 2)))

    @pytest.mark.parametrize("seed", [0, 1])
    def test_global_avg_pool_finite_difference(self, seed):
        rng = np.random.default_rng(seed)
        x = rng.standard_normal((2, 3, 4, 4))
        assert gradient_check(GlobalAvgPool(), x, seed=seed) < 1e-5


class TestLinear:
    def test_forward_values(self):
        w = np.array([[1.0, 2.0], [3.0, 4.0]])
        b = np.array([0.5, -0.5])
        out = linear_forward(np.array([[1.0, 1.0]]), w, b)
        np.testing.assert_allclose(out, [[3.5, 6.5]])

    def test_feature_mismatch_raises(self):
        with pytest.raises(ValueError, match="features"):
            linear_forward(np.zeros((1, 3)), np.zeros((2, 2)), np.zeros(2))

    @pytest.mark.parametrize("seed", [0, 1, 2])
    def test_finite_difference(self, seed):
        rng = np.random.default_rng(seed)
        layer = Linear(rng.standard_normal((4, 6)), rng.standard_normal(4))
        x = rng.standard_normal((3, 6))
        assert gradient_check(layer, x, seed=seed) < 1e-6


class TestSoftmaxCrossEntropy:
    def test_single_sample_gradient_is_softmax_minus_onehot(self):
        logits = np.array([[1.0, 2.0, 0.5]])
        loss, grad = softmax_cross_entropy(logits, np.array([1]))
        probs = np.exp(logits[0]) / np.exp(logits[0]).sum()
        expected = probs.copy()
        expected[1] -= 1.0
        np.testing.assert_allclose(grad[0], expected, rtol=1e-12)
        assert loss == pytest.approx(-np.log(probs[1]))

    def test_uniform_logits_loss(self):
        loss, _ = softmax_cross_entropy(np.zeros((4, 5)), np.array([0, 1, 2, 3]))
        assert loss == pytest.approx(np.log(5.0))

    def test_large_logits_stable(self):
        loss, grad = softmax_cross_entropy(np.array([[1000.0, 0.0]]), np.array([0]))
        assert np.isfinite(loss) and np.all(np.isfinite(grad))

    @pytest.mark.parametrize("seed", [0, 1, 2])
    def test_finite_difference(self, seed):
        rng = np.random.default_rng(seed)
        logits = rng.standard_normal((4, 5))
        labels = rng.integers(0, 5, 4)
        _, grad = softmax_cross_entropy(logits, labels)
        step = 1e-6
        numeric = np.zeros_like(logits)
        for idx in np.ndindex(*logits.shape):
            orig = logits[idx]
            logits[idx] = orig + step
            hi, _ = softmax_cross_entropy(logits, labels)
            logits[idx] = orig - step
            lo, _ = softmax_cross_entropy(logits, labels)
            logits[idx] = orig
            numeric[idx] = (hi - lo) / (2 * step)
        denom = np.maximum(np.maximum(np.abs(grad), np.abs(numeric)), 1e-8)
        assert np.max(np.abs(grad - numeric) / denom) < 1e-5

    def test_label_out_of_range(self):
        with pytest.raises(ValueError, match="labels"):
            softmax_cross_entropy(np.zeros((1, 3)), np.array([3]))


class TestSGD:
    def test_plain_step(self):
        p = np.array([1.0])
        sgd_step([p], [np.array([2.0])], lr=0.1)
        assert p[0] == pytest.approx(0.8)

    def test_zero_gradient_leaves_param(self):
        p = np.array([3.0])
        sgd_step([p], [np.array([0.0])], lr=0.5, momentum=0.9)
        assert p[0] == pytest.approx(3.0)

    def test_two_momentum_steps(self):
        p = np.array([0.0])
        g = np.array([1.0])
        vel = sgd_step([p], [g], lr=0.1, momentum=0.9)
        sgd_step([p], [g], lr=0.1, momentum=0.9, velocities=vel)
        assert p[0] == pytest.approx(-0.29)

    def test_non_positive_lr_raises(self):
        with pytest.raises(ValueError, match="learning rate"):
            sgd_step([np.zeros(1)], [np.zeros(1)], lr=0.0)

    def test_shape_mismatch_raises(self):
        with pytest.raises(ValueError, match="shape"):
            sgd_step([np.zeros(2)], [np.zeros(3)], lr=0.1)
