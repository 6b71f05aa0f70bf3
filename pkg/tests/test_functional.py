import numpy as np
import pytest

from ssnet.errors import ConfigurationError, DimensionError
from ssnet.functional import (
    PRELU,
    TANH,
    activation,
    batchnorm2d,
    concat_channels,
    conv2d,
    dropout,
    maxpool2x2,
    prelu,
    softmax_cross_entropy,
    tanh,
)
from ssnet.tensor import Tape, Tensor


def naive_conv2d(x, w, b, stride, dilation, padding):
    """Six nested loops over batch, filters, output rows/cols and kernel taps."""
    batch, channels, height, width = x.shape
    out_c, _, kh, kw = w.shape
    dh, dw = dilation
    ph, pw = padding
    padded = np.pad(x, ((0, 0), (0, 0), (ph, ph), (pw, pw)))
    out_h = (height + 2 * ph - dh * (kh - 1) - 1) // stride + 1
    out_w = (width + 2 * pw - dw * (kw - 1) - 1) // stride + 1
    out = np.zeros((batch, out_c, out_h, out_w))
    for n in range(batch):
        for o in range(out_c):
            for i in range(out_h):
                for j in range(out_w):
                    for p in range(kh):
                        for q in range(kw):
                            patch = padded[n, :, i * stride + p * dh, j * stride + q * dw]
                            out[n, o, i, j] += patch @ w[o, :, p, q]
            if b is not None:
                out[n, o] += b[o]
    return out


class TestConv2d:
    def test_identity_kernel(self, rng):
        x = Tensor(rng.normal(size=(2, 1, 5, 4)))
        out = conv2d(x, Tensor(np.ones((1, 1, 1, 1))))
        np.testing.assert_array_equal(out.data, x.data)

    def test_hand_cross_correlation(self):
        x = Tensor(np.array([[1.0, 2.0], [3.0, 4.0]]).reshape(1, 1, 2, 2))
        w = Tensor(np.array([[1.0, 0.0], [0.0, 1.0]]).reshape(1, 1, 2, 2))
        out = conv2d(x, w)
        assert out.shape == (1, 1, 1, 1)
        assert out.item() == 5.0

    def test_bias_only(self):
        out = conv2d(Tensor.zeros((1, 2, 3, 3)), Tensor(np.ones((3, 2, 3, 3))), Tensor(np.full(3, 0.5)), padding=1)
        np.testing.assert_array_equal(out.data, np.full((1, 3, 3, 3), 0.5))

    @pytest.mark.parametrize(
        "kernel,stride,dilation,padding",
        [
            ((1, 1), 1, (1, 1), (0, 0)),
            ((3, 1), 1, (2, 1), (2, 0)),
            ((1, 3), 1, (1, 4), (0, 4)),
            ((3, 3), 2, (1, 1), (1, 1)),
        ],
    )
    def test_matches_naive_loops(self, rng, kernel, stride, dilation, padding):
        x = rng.normal(size=(2, 3, 8, 8))
        w = rng.normal(size=(4, 3) + kernel)
        b = rng.normal(size=4)
        out = conv2d(Tensor(x), Tensor(w), Tensor(b), stride, dilation, padding)
        np.testing.assert_allclose(out.data, naive_conv2d(x, w, b, stride, dilation, padding), atol=1e-12)

    def test_im2col_agrees_with_direct(self, rng):
        x = Tensor(rng.normal(size=(2, 5, 9, 7)))
        w = Tensor(rng.normal(size=(6, 5, 3, 3)))
        direct = conv2d(x, w, stride=2, dilation=(1, 2), padding=(1, 2))
        fast = conv2d(x, w, stride=2, dilation=(1, 2), padding=(1, 2), im2col=True)
        np.testing.assert_allclose(fast.data, direct.data, atol=1e-10)

    def test_channel_mismatch(self):
        with pytest.raises(DimensionError):
            conv2d(Tensor.zeros((1, 2, 4, 4)), Tensor.zeros((1, 3, 1, 1)))

    def test_non_positive_output(self):
        with pytest.raises(ConfigurationError):
            conv2d(Tensor.zeros((1, 1, 2, 2)), Tensor.zeros((1, 1, 3, 3)))

    def test_bad_stride(self):
        with pytest.raises(ConfigurationError):
            conv2d(Tensor.zeros((1, 1, 4, 4)), Tensor.zeros((1, 1, 1, 1)), stride=0)


class TestActivation:
    def test_prelu_definition(self):
        x = Tensor(np.array([-4.0, 4.0]).reshape(1, 1, 1, 2))
        out = activation(x, PRELU, Tensor([0.25]))
        np.testing.assert_array_equal(out.data.ravel(), [-1.0, 4.0])

    def test_tanh_values(self):
        out = activation(Tensor(np.array([0.0, 100.0])), TANH)
        assert out.data[0] == 0.0
        assert abs(out.data[1] - 1.0) < 1e-12

    def test_prelu_slope_length(self):
        with pytest.raises(DimensionError):
            prelu(Tensor.zeros((1, 3, 2, 2)), Tensor([0.25, 0.25]))

    def test_prelu_slope_gradient(self):
        x = Tensor(np.array([-2.0, 3.0, -1.0, 0.5]).reshape(1, 1, 2, 2))
        slope = Tensor([0.25], requires_grad=True)
        with Tape() as tape:
            tape.backward(prelu(x, slope).sum())
        np.testing.assert_allclose(slope.grad, [-3.0])

    def test_tanh_gradient(self):
        x = Tensor([0.3], requires_grad=True)
        with Tape() as tape:
            tape.backward(tanh(x).sum())
        np.testing.assert_allclose(x.grad, [1.0 - np.tanh(0.3) ** 2])


class TestMaxpool:
    def test_max(self):
        x = Tensor(np.array([[1.0, 2.0], [3.0, 4.0]]).reshape(1, 1, 2, 2))
        assert maxpool2x2(x).item() == 4.0

    def test_negative_values(self):
        x = Tensor(np.array([[-1.0, -2.0], [-3.0, -4.0]]).reshape(1, 1, 2, 2))
        assert maxpool2x2(x).item() == -1.0

    def test_ties_route_to_first_element(self):
        x = Tensor(np.full((1, 2, 4, 4), 7.0), requires_grad=True)
        with Tape() as tape:
            out = maxpool2x2(x)
            tape.backward(out.sum())
        np.testing.assert_array_equal(out.data, np.full((1, 2, 2, 2), 7.0))
        expected = np.zeros((4, 4))
        expected[::2, ::2] = 1.0
        np.testing.assert_array_equal(x.grad[0, 0], expected)
        np.testing.assert_array_equal(x.grad[0, 1], expected)

    def test_odd_size(self):
        with pytest.raises(DimensionError):
            maxpool2x2(Tensor.zeros((1, 1, 3, 4)))


class TestConcat:
    def test_shapes_and_order(self, rng):
        a = Tensor(rng.normal(size=(1, 3, 4, 4)))
        b = Tensor(rng.normal(size=(1, 13, 4, 4)))
        out = concat_channels(a, b)
        assert out.shape == (1, 16, 4, 4)
        np.testing.assert_array_equal(out.data[:, 0], a.data[:, 0])
        np.testing.assert_array_equal(out.data[:, 3:], b.data)

    def test_zero_channel_neutral(self, rng):
        a = Tensor(rng.normal(size=(2, 3, 2, 2)))
        np.testing.assert_array_equal(concat_channels(a, Tensor.zeros((2, 0, 2, 2))).data, a.data)

    def test_gradient_split(self, rng):
        a = Tensor(rng.normal(size=(1, 1, 2, 2)), requires_grad=True)
        b = Tensor(rng.normal(size=(1, 2, 2, 2)), requires_grad=True)
        with Tape() as tape:
            tape.backward((concat_channels(a, b) * 2.0).sum())
        np.testing.assert_array_equal(a.grad, np.full(a.shape, 2.0))
        np.testing.assert_array_equal(b.grad, np.full(b.shape, 2.0))

    def test_spatial_mismatch(self):
        with pytest.raises(DimensionError):
            concat_channels(Tensor.zeros((1, 1, 2, 2)), Tensor.zeros((1, 1, 2, 3)))


class TestBatchnorm:
    def test_eval_identity_parameters(self, rng):
        x = Tensor(rng.normal(size=(2, 3, 4, 4)))
        out = batchnorm2d(x, Tensor(np.ones(3)), Tensor(np.zeros(3)), np.zeros(3), np.ones(3), training=False)
        np.testing.assert_allclose(out.data, x.data / np.sqrt(1.0 + 1e-5))

    def test_train_normalizes(self, rng):
        x = Tensor(rng.normal(3.0, 2.0, size=(4, 2, 5, 5)))
        out = batchnorm2d(x, Tensor(np.ones(2)), Tensor(np.zeros(2)), np.zeros(2), np.ones(2), training=True, eps=1e-12)
        np.testing.assert_allclose(out.data.mean(axis=(0, 2, 3)), 0.0, atol=1e-6)
        np.testing.assert_allclose(out.data.var(axis=(0, 2, 3)), 1.0, atol=1e-6)

    def test_constant_beta(self, rng):
        x = Tensor(rng.normal(size=(2, 2, 3, 3)))
        out = batchnorm2d(x, Tensor(np.zeros(2)), Tensor(np.full(2, 5.0)), np.zeros(2), np.ones(2), training=True)
        np.testing.assert_allclose(out.data, 5.0)

    def test_train_updates_running_stats(self, rng):
        x = Tensor(rng.normal(2.0, 1.0, size=(2, 1, 4, 4)))
        mean, var = np.zeros(1), np.ones(1)
        batchnorm2d(x, Tensor(np.ones(1)), Tensor(np.zeros(1)), mean, var, training=True, momentum=0.1)
        np.testing.assert_allclose(mean, 0.1 * x.data.mean())
        np.testing.assert_allclose(var, 0.9 + 0.1 * x.data.var(ddof=1))

    def test_empty_batch(self):
        with pytest.raises(ConfigurationError):
            batchnorm2d(Tensor.zeros((0, 2, 3, 3)), Tensor(np.ones(2)), Tensor(np.zeros(2)), np.zeros(2), np.ones(2), True)

    def test_vector_mismatch(self):
        with pytest.raises(DimensionError):
            batchnorm2d(Tensor.zeros((1, 2, 3, 3)), Tensor(np.ones(3)), Tensor(np.zeros(2)), np.zeros(2), np.ones(2), True)


class TestDropout:
    def test_eval_is_identity(self, rng):
        x = Tensor(rng.normal(size=(2, 3, 4, 4)))
        assert dropout(x, 0.5, training=False, seed=1) is x

    def test_inverted_scaling(self):
        x = Tensor(np.ones((1, 4, 16, 16)))
        out = dropout(x, 0.25, training=True, seed=9)
        kept = out.data[out.data != 0.0]
        np.testing.assert_allclose(kept, 1.0 / 0.75)
        assert 0.15 < np.mean(out.data == 0.0) < 0.35

    def test_seeded(self):
        x = Tensor(np.ones((1, 2, 8, 8)))
        np.testing.assert_array_equal(dropout(x, 0.3, True, 5).data, dropout(x, 0.3, True, 5).data)

    def test_probability_one_rejected(self):
        with pytest.raises(ConfigurationError):
            dropout(Tensor.zeros((1, 1, 1, 1)), 1.0, training=True, seed=0)


class TestCrossEntropy:
    def test_uniform_logits(self):
        logits = Tensor.zeros((1, 4, 2, 2))
        labels = np.array([[[0, 1], [2, 3]]])
        assert softmax_cross_entropy(logits, labels).item() == pytest.approx(np.log(4.0))

    def test_ignored_pixels(self):
        logits = Tensor(np.array([5.0, -5.0]).reshape(1, 2, 1, 1) * np.ones((1, 2, 1, 2)))
        labels = np.array([[[0, -1]]])
        loss = softmax_cross_entropy(logits, labels).item()
        assert loss == pytest.approx(np.log1p(np.exp(-10.0)))

    def test_label_range(self):
        with pytest.raises(DimensionError):
            softmax_cross_entropy(Tensor.zeros((1, 2, 1, 1)), np.array([[[2]]]))
