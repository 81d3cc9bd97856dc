import numpy as np
import pytest
from numpy.testing import assert_allclose

from foundation.core.autodiff import (
    ConvParams,
    Tensor,
    add,
    backward,
    channel_softmax,
    concat_channels,
    conv3d,
    conv_transpose3d,
    dice_loss,
    dropout,
    mul,
    no_grad,
    parameter,
    relu,
    same_padding,
    select_channel,
    soft_dice,
    total,
)
from foundation.core.errors import InvalidArgumentError


def _naive_conv(x, w, b, stride):
    batch, cin = x.shape[:2]
    cout, k = w.shape[0], w.shape[2]
    geometry = [same_padding(n, k, stride) for n in x.shape[2:]]
    out_dims = [g[0] for g in geometry]
    xp = np.pad(x, ((0, 0), (0, 0)) + tuple((g[1], g[2]) for g in geometry))
    out = np.zeros((batch, cout) + tuple(out_dims))
    for n in range(batch):
        for o in range(cout):
            for i in range(out_dims[0]):
                for j in range(out_dims[1]):
                    for l in range(out_dims[2]):
                        acc = b[o]
                        for c in range(cin):
                            patch = xp[n, c, i * stride: i * stride + k, j * stride: j * stride + k,
                                       l * stride: l * stride + k]
                            acc += (w[o, c] * patch).sum()
                        out[n, o, i, j, l] = acc
    return out


def _naive_transpose(x, w, b):
    """Scatter every input voxel's kernel-weighted copy onto the doubled, padded grid, then crop"""
    batch, cin = x.shape[:2]
    cout, k = w.shape[1], w.shape[2]
    full = [2 * n for n in x.shape[2:]]
    pads = [same_padding(n, k, 2)[1:] for n in full]
    out = np.zeros((batch, cout) + tuple(n + lo + hi for n, (lo, hi) in zip(full, pads)))
    for n in range(batch):
        for c in range(cin):
            for i, j, l in np.ndindex(*x.shape[2:]):
                out[n, :, 2 * i: 2 * i + k, 2 * j: 2 * j + k, 2 * l: 2 * l + k] += x[n, c, i, j, l] * w[c]
    crop = tuple(slice(lo, lo + n) for n, (lo, _) in zip(full, pads))
    return out[(slice(None), slice(None)) + crop] + b[None, :, None, None, None]


def _conv_params(rng, cout, cin, k, stride=1):
    return ConvParams(parameter(rng.normal(size=(cout, cin, k, k, k))), parameter(rng.normal(size=cout)), stride)


class TestConvolution:
    @pytest.mark.parametrize("stride", [1, 2, 4])
    @pytest.mark.parametrize("kernel", [3, 5, 7, 9, 11])
    def test_matches_naive_loops(self, kernel, stride):
        rng = np.random.default_rng(kernel * 10 + stride)
        for dims in [(5, 5, 5), (9, 9, 9), tuple(rng.integers(1, 10, size=3))]:
            x = rng.normal(size=(1, 2) + dims)
            p = _conv_params(rng, 3, 2, kernel, stride)
            out = conv3d(Tensor(x), p)
            assert_allclose(out.value, _naive_conv(x, p.weight.value, p.bias.value, stride), atol=1e-10)

    @pytest.mark.parametrize("kernel", [3, 5, 7, 9, 11])
    def test_transpose_matches_naive_scatter(self, kernel):
        rng = np.random.default_rng(kernel)
        for dims in [(2, 2, 2), (4, 3, 5), tuple(rng.integers(1, 6, size=3))]:
            x = rng.normal(size=(1, 2) + dims)
            p = ConvParams(parameter(rng.normal(size=(2, 3, kernel, kernel, kernel))),
                           parameter(rng.normal(size=3)), 2)
            out = conv_transpose3d(Tensor(x), p)
            assert_allclose(out.value, _naive_transpose(x, p.weight.value, p.bias.value), atol=1e-10)

    @pytest.mark.parametrize("stride", [1, 4])
    def test_transpose_rejects_other_strides(self, stride):
        p = ConvParams(parameter(np.zeros((1, 1, 3, 3, 3))), parameter(np.zeros(1)), stride)
        with pytest.raises(InvalidArgumentError):
            conv_transpose3d(Tensor(np.zeros((1, 1, 2, 2, 2))), p)

    def test_output_dims_ceil(self):
        rng = np.random.default_rng(1)
        out = conv3d(Tensor(rng.normal(size=(1, 1, 9, 8, 5))), _conv_params(rng, 2, 1, 5, 4))
        assert out.shape == (1, 2, 3, 2, 2)

    def test_transpose_is_adjoint(self):
        rng = np.random.default_rng(2)
        w = rng.normal(size=(3, 2, 3, 3, 3))
        p = ConvParams(parameter(w), parameter(np.zeros(3)), 2)
        pt = ConvParams(parameter(w), parameter(np.zeros(2)), 2)
        y = rng.normal(size=(1, 2, 6, 8, 4))
        x = rng.normal(size=(1, 3, 3, 4, 2))
        lhs = float((conv3d(Tensor(y), p).value * x).sum())
        rhs = float((y * conv_transpose3d(Tensor(x), pt).value).sum())
        assert lhs == pytest.approx(rhs, rel=1e-10)

    def test_transpose_doubles_dims(self):
        rng = np.random.default_rng(3)
        p = ConvParams(parameter(rng.normal(size=(4, 2, 3, 3, 3))), parameter(np.zeros(2)), 2)
        out = conv_transpose3d(Tensor(rng.normal(size=(1, 4, 3, 5, 2))), p)
        assert out.shape == (1, 2, 6, 10, 4)

    def test_channel_mismatch(self):
        rng = np.random.default_rng(4)
        with pytest.raises(InvalidArgumentError):
            conv3d(Tensor(rng.normal(size=(1, 3, 4, 4, 4))), _conv_params(rng, 2, 2, 3))

    def test_even_kernel_rejected(self):
        with pytest.raises(InvalidArgumentError):
            ConvParams(parameter(np.zeros((1, 1, 2, 2, 2))), parameter(np.zeros(1)))


class TestElementwise:
    def test_add_zero_identity_and_grads(self):
        x = parameter(np.arange(6.0).reshape(1, 1, 1, 2, 3))
        y = parameter(np.zeros((1, 1, 1, 2, 3)))
        out = add(x, y)
        assert_allclose(out.value, x.value)
        backward(total(out))
        assert_allclose(x.grad, np.ones(x.shape))
        assert_allclose(y.grad, np.ones(y.shape))

    def test_square_sum_gradient(self):
        x = parameter(np.random.default_rng(5).normal(size=(2, 3)))
        backward(total(mul(x, x)))
        assert_allclose(x.grad, 2.0 * x.value)

    def test_relu_values_and_gradient(self):
        assert_allclose(relu(Tensor(np.array([-1.0, 0.0, 2.0]))).value, [0.0, 0.0, 2.0])
        rng = np.random.default_rng(8)
        # keep every entry at least 1e-2 from the kink
        values = rng.choice([-1.0, 1.0], size=(1, 2, 3, 3, 2)) * rng.uniform(1e-2, 1.0, size=(1, 2, 3, 3, 2))
        weights = rng.normal(size=values.shape)
        x = parameter(values)
        backward(total(mul(relu(x), Tensor(weights))))
        h = 1e-6
        numeric = np.zeros_like(values)
        for idx in np.ndindex(values.shape):
            up, down = values.copy(), values.copy()
            up[idx] += h
            down[idx] -= h
            numeric[idx] = ((relu(Tensor(up)).value * weights).sum() - (relu(Tensor(down)).value * weights).sum()) / (2 * h)
        assert_allclose(x.grad, numeric, atol=1e-5)
        assert_allclose(x.grad, np.where(values > 0, weights, 0.0))

    def test_dropout_identity_cases(self):
        x = Tensor(np.ones((1, 1, 3, 3, 3)))
        assert dropout(x, 0.0, True, np.random.default_rng(0)) is x
        assert dropout(x, 0.7, False, None) is x

    def test_dropout_preserves_mean(self):
        x = Tensor(np.ones((1, 1, 100, 10, 10)))
        out = dropout(x, 0.15, True, np.random.default_rng(6))
        # 3 standard errors of the inverted-dropout mean over 1e4 draws
        se = np.sqrt(0.15 / 0.85) / 100.0
        assert abs(out.value.mean() - 1.0) < 3 * se

    def test_softmax(self):
        s = channel_softmax(Tensor(np.zeros((1, 2, 1, 1, 1))))
        assert_allclose(s.value.ravel(), [0.5, 0.5])
        big = channel_softmax(Tensor(np.array([1000.0, 0.0]).reshape(1, 2, 1, 1, 1)))
        assert np.all(np.isfinite(big.value))
        assert_allclose(big.value.ravel(), [1.0, 0.0])

    def test_softmax_jacobian(self):
        rng = np.random.default_rng(7)
        logits = rng.normal(size=(1, 3, 2, 1, 1))
        weights = rng.normal(size=logits.shape)
        x = parameter(logits)
        backward(total(mul(channel_softmax(x), Tensor(weights))))
        h = 1e-6
        numeric = np.zeros_like(logits)
        for idx in np.ndindex(logits.shape):
            up, down = logits.copy(), logits.copy()
            up[idx] += h
            down[idx] -= h
            f_up = (channel_softmax(Tensor(up)).value * weights).sum()
            f_down = (channel_softmax(Tensor(down)).value * weights).sum()
            numeric[idx] = (f_up - f_down) / (2 * h)
        assert_allclose(x.grad, numeric, atol=1e-5)

    def test_concat_and_select_route_gradients(self):
        a = parameter(np.ones((1, 16, 2, 2, 2)))
        b = parameter(np.ones((1, 32, 2, 2, 2)))
        joined = concat_channels([a, b])
        assert joined.shape[1] == 48
        assert concat_channels([a]) is a
        backward(total(select_channel(joined, 20)))
        assert a.grad.sum() == 0.0
        assert b.grad[:, 4].sum() == 8.0
        assert b.grad.sum() == 8.0


class TestSoftDice:
    def test_perfect_and_empty(self):
        g = np.zeros((1, 1, 4, 4, 4))
        g[0, 0, 1:3, 1:3, 1:3] = 1
        assert float(soft_dice(Tensor(g), g).value) == pytest.approx(1.0)
        assert float(soft_dice(Tensor(np.zeros_like(g)), g).value) == pytest.approx(0.0, abs=1e-5)

    def test_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(8)
        p0 = rng.random((1, 1, 3, 3, 2))
        g = rng.random(p0.shape) < 0.5
        p = parameter(p0)
        backward(dice_loss(p, g))
        h = 1e-6
        for idx in [(0, 0, 0, 0, 0), (0, 0, 1, 2, 1), (0, 0, 2, 1, 0)]:
            up, down = p0.copy(), p0.copy()
            up[idx] += h
            down[idx] -= h
            numeric = (float(dice_loss(Tensor(up), g).value) - float(dice_loss(Tensor(down), g).value)) / (2 * h)
            assert p.grad[idx] == pytest.approx(numeric, rel=1e-5, abs=1e-9)


class TestBackward:
    def test_no_grad_keeps_no_graph(self):
        x = parameter(np.ones(3))
        with no_grad():
            out = mul(x, x)
        assert not out.requires_grad
        with pytest.raises(InvalidArgumentError):
            backward(total(out))

    def test_non_scalar_loss_rejected(self):
        x = parameter(np.ones(3))
        with pytest.raises(InvalidArgumentError):
            backward(mul(x, x))

    def test_shared_node_accumulates(self):
        x = parameter(np.array([3.0]))
        y = add(x, x)
        backward(total(mul(y, y)))
        # d/dx (2x)^2 = 8x
        assert_allclose(x.grad, [24.0])
