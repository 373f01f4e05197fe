import numpy as np
import pytest

from bmasklab import tensor as T
from bmasklab.errors import ConfigError, GraphError, ShapeError
from bmasklab.params import ParamSet, sgd_step
from bmasklab.tensor import (Tensor, add, backward, conv2d, conv_transpose2d,
                             mul, relu, sigmoid, sum_all)

from helpers import fd_check


def t(data, grad=False):
    return Tensor(np.asarray(data, dtype=float), requires_grad=grad)


class TestConv2d:
    def test_scaling_identity(self):
        x = t(np.ones((1, 1, 3, 3)))
        w = t(np.full((1, 1, 1, 1), 2.0))
        out = conv2d(x, w, t(np.zeros(1)))
        assert np.array_equal(out.data, np.full((1, 1, 3, 3), 2.0))

    def test_hand_convolution_center(self):
        x = t(np.arange(1, 10).reshape(1, 1, 3, 3))
        w = t(np.ones((1, 1, 3, 3)))
        out = conv2d(x, w, t(np.zeros(1)), pad=1)
        assert out.data[0, 0, 1, 1] == 45.0

    def test_strided_halves_28_to_14(self):
        x = t(np.zeros((1, 256, 28, 28)))
        w = t(np.zeros((8, 256, 3, 3)))
        out = conv2d(x, w, t(np.zeros(8)), stride=2, pad=1)
        assert out.data.shape == (1, 8, 14, 14)

    def test_channel_mismatch_rejected(self):
        with pytest.raises(ShapeError, match="channels"):
            conv2d(t(np.zeros((1, 3, 4, 4))), t(np.zeros((2, 4, 3, 3))),
                   t(np.zeros(2)))

    def test_dirac_kernel_is_identity(self):
        rng = np.random.default_rng(0)
        x = t(rng.standard_normal((2, 3, 6, 5)))
        w = np.zeros((3, 3, 3, 3))
        for c in range(3):
            w[c, c, 1, 1] = 1.0
        out = conv2d(x, t(w), t(np.zeros(3)), pad=1)
        assert np.array_equal(out.data, x.data)

    def test_shape_formula(self):
        rng = np.random.default_rng(1)
        for k, s, p in [(1, 1, 0), (3, 1, 1), (3, 2, 1), (5, 2, 2), (3, 3, 0)]:
            h, w = 11, 9
            x = t(rng.standard_normal((1, 2, h, w)))
            kw = t(rng.standard_normal((4, 2, k, k)))
            out = conv2d(x, kw, t(np.zeros(4)), stride=s, pad=p)
            assert out.data.shape == (1, 4, (h + 2 * p - k) // s + 1,
                                      (w + 2 * p - k) // s + 1)


class TestConvTranspose:
    def test_single_input_broadcast(self):
        x = t(np.full((1, 1, 1, 1), 3.0))
        w = t(np.ones((1, 1, 2, 2)))
        out = conv_transpose2d(x, w)
        assert np.array_equal(out.data, np.full((1, 1, 2, 2), 3.0))

    def test_doubles_spatial_dims(self):
        out = conv_transpose2d(t(np.zeros((1, 6, 14, 14))),
                               t(np.zeros((6, 4, 2, 2))))
        assert out.data.shape == (1, 4, 28, 28)

    def test_unsupported_configuration(self):
        with pytest.raises(ConfigError):
            conv_transpose2d(t(np.zeros((1, 2, 3, 3))),
                             t(np.zeros((2, 2, 3, 3))))
        with pytest.raises(ConfigError):
            conv_transpose2d(t(np.zeros((1, 2, 3, 3))),
                             t(np.zeros((2, 2, 2, 2))), stride=1)

    def test_gradients_match_finite_differences(self):
        rng = np.random.default_rng(2)
        x = t(rng.standard_normal((1, 2, 3, 3)), grad=True)
        w = t(rng.standard_normal((2, 3, 2, 2)), grad=True)

        def loss():
            y = conv_transpose2d(x, w)
            return sum_all(mul(y, y))

        worst = fd_check(loss, [x, w], rng, n_coords=20)
        assert worst < 1e-6


class TestElementwise:
    def test_relu_values(self):
        out = relu(t([-1.0, 0.0, 2.0]))
        assert np.array_equal(out.data, [0.0, 0.0, 2.0])

    def test_relu_identity_on_positives(self):
        x = t([0.5, 3.0, 1e-9])
        assert np.array_equal(relu(x).data, x.data)

    def test_relu_subgradient(self):
        x = t([-1.0, 2.0], grad=True)
        backward(sum_all(relu(x)))
        assert np.array_equal(x.grad, [0.0, 1.0])

    def test_sigmoid_center_and_saturation(self):
        assert sigmoid(t([0.0])).data[0] == 0.5
        assert abs(sigmoid(t([20.0])).data[0] - 1.0) < 1e-8

    def test_sigmoid_derivative(self):
        rng = np.random.default_rng(3)
        x = t([1.0], grad=True)
        backward(sum_all(sigmoid(x)))
        s = 1 / (1 + np.exp(-1))
        assert abs(x.grad[0] - s * (1 - s)) < 1e-12
        x.grad = None
        worst = fd_check(lambda: sum_all(sigmoid(x)), [x], rng, n_coords=3)
        assert worst < 1e-6

    def test_add(self):
        a = t([1.0, 2.0])
        assert np.array_equal(add(a, t([0.0, 0.0])).data, a.data)
        assert np.array_equal(add(t([1.0, 2.0]), t([3.0, 4.0])).data, [4.0, 6.0])

    def test_add_gradient_flows_to_both(self):
        a = t([1.0, 2.0], grad=True)
        b = t([3.0, 4.0], grad=True)
        backward(sum_all(add(a, b)))
        assert np.array_equal(a.grad, [1.0, 1.0])
        assert np.array_equal(b.grad, [1.0, 1.0])

    def test_add_shape_mismatch(self):
        with pytest.raises(ShapeError):
            add(t([1.0]), t([1.0, 2.0]))


class TestBackward:
    def test_polynomial_derivative(self):
        x = t([1.0, -2.0], grad=True)
        backward(sum_all(mul(x, x)))
        assert np.array_equal(x.grad, [2.0, -4.0])

    def test_unused_parameter_gets_zeros(self):
        ps = ParamSet(seed=1)
        used = ps.add("used.w", (2,), fan_in=2)
        ps.add("unused.w", (3,), fan_in=3)
        backward(sum_all(mul(used, used)), ps)
        assert np.array_equal(ps["unused.w"].grad, np.zeros(3))
        assert ps["used.w"].grad is not None

    def test_non_scalar_loss_rejected(self):
        x = t([1.0, 2.0], grad=True)
        with pytest.raises(GraphError, match="scalar"):
            backward(mul(x, x))

    def test_grad_accumulates_across_backward_calls(self):
        x = t([1.0], grad=True)
        backward(sum_all(mul(x, x)))
        backward(sum_all(mul(x, x)))
        assert np.array_equal(x.grad, [4.0])


class TestSgd:
    def test_plain_step(self):
        ps = ParamSet(0)
        p = ps.add("p.w", (1,))
        p.data = np.array([1.0])
        p.grad = np.array([1.0])
        sgd_step(ps, lr=0.1)
        assert np.allclose(p.data, [0.9])

    def test_momentum_recursion(self):
        ps = ParamSet(0)
        p = ps.add("p.w", (1,))
        for _ in range(2):
            p.grad = np.array([1.0])
            sgd_step(ps, lr=0.1, momentum=0.9)
        assert np.allclose(p.data, [-0.29])

    def test_zero_lr_keeps_parameters(self):
        ps = ParamSet(0)
        p = ps.add("p.w", (4,), fan_in=4)
        before = p.data.copy()
        p.grad = np.ones(4)
        sgd_step(ps, lr=0.0, momentum=0.9, weight_decay=1e-4)
        assert np.array_equal(p.data, before)

    def test_missing_grad_rejected(self):
        ps = ParamSet(0)
        ps.add("p.w", (1,))
        with pytest.raises(GraphError, match="no gradient"):
            sgd_step(ps, lr=0.1)

    def test_weight_decay_skips_biases(self):
        ps = ParamSet(0)
        w = ps.add("layer.w", (1,))
        b = ps.add("layer.b", (1,))
        w.data = np.array([1.0])
        b.data = np.array([1.0])
        w.grad = np.zeros(1)
        b.grad = np.zeros(1)
        sgd_step(ps, lr=1.0, weight_decay=0.5)
        assert np.allclose(w.data, [0.5])
        assert np.allclose(b.data, [1.0])


class TestGradcheckSweep:
    def test_random_small_shapes(self):
        """Analytic vs central differences across random op compositions."""
        rng = np.random.default_rng(42)
        shapes = [(1, 1, 4, 4), (1, 2, 5, 3), (2, 1, 3, 5), (1, 3, 6, 6),
                  (2, 2, 4, 4), (1, 1, 7, 2), (1, 2, 2, 2), (3, 1, 4, 3),
                  (1, 4, 3, 3), (2, 3, 5, 5)]
        coords = 0
        for shape in shapes:
            n, c, h, w = shape
            o = int(rng.integers(1, 4))
            k, s, p = [(1, 1, 0), (3, 1, 1), (3, 2, 1)][int(rng.integers(3))]
            if h + 2 * p < k or w + 2 * p < k:
                k, s, p = 1, 1, 0
            x = t(rng.standard_normal(shape), grad=True)
            wt = t(rng.standard_normal((o, c, k, k)) * 0.7, grad=True)
            b = t(rng.standard_normal(o) * 0.2, grad=True)

            def loss():
                y = relu(conv2d(x, wt, b, stride=s, pad=p))
                z = sigmoid(y)
                return sum_all(mul(z, z))

            fd_check(loss, [x, wt, b], rng, n_coords=4)
            coords += 3 * 4
        assert coords >= 100

    def test_bitwise_determinism(self):
        rng = np.random.default_rng(7)
        x = rng.standard_normal((1, 3, 8, 8))
        w = rng.standard_normal((4, 3, 3, 3))

        def run():
            xt = t(x, grad=True)
            out = sum_all(sigmoid(conv2d(xt, t(w), t(np.zeros(4)), pad=1)))
            backward(out)
            return out.data.copy(), xt.grad.copy()

        o1, g1 = run()
        o2, g2 = run()
        assert np.array_equal(o1, o2)
        assert np.array_equal(g1, g2)


class TestTensorInvariants:
    def test_shape_matches_data_length(self):
        x = t(np.zeros((2, 3, 4)))
        assert int(np.prod(x.shape)) == x.data.size

    def test_finite_outputs_on_finite_inputs(self):
        rng = np.random.default_rng(9)
        x = t(rng.standard_normal((1, 2, 8, 8)) * 50, grad=True)
        w = t(rng.standard_normal((3, 2, 3, 3)), grad=True)
        out = sum_all(sigmoid(conv2d(x, w, t(np.zeros(3)), pad=1)))
        backward(out)
        assert np.isfinite(out.data).all()
        assert np.isfinite(x.grad).all()
        assert np.isfinite(w.grad).all()
