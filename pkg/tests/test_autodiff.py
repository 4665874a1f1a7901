import math
import zlib

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from diode import autodiff as ad
from diode.autodiff import Tensor
from diode.errors import ConfigurationError, ExplosionError, UsageError

from helpers import grad_catalogue


def leaf(x):
    return Tensor(np.asarray(x, dtype=np.float64), tracked=True)


class TestConv2d:
    def test_identity_kernel(self):
        x = np.array([[[[3.7]]]])
        out = ad.conv2d(Tensor(x), Tensor(np.ones((1, 1, 1, 1))), Tensor(np.zeros(1)))
        np.testing.assert_array_equal(out.data, x)

    def test_zero_input_gives_bias(self):
        rng = np.random.default_rng(0)
        w = rng.normal(size=(3, 2, 3, 3))
        b = np.array([0.5, -1.0, 2.0])
        out = ad.conv2d(Tensor(np.zeros((2, 2, 5, 5))), Tensor(w), Tensor(b), 1, 1)
        for c in range(3):
            np.testing.assert_array_equal(out.data[:, c], b[c])

    def test_hand_cross_correlation(self):
        x = np.array([[[[1.0, 2.0], [3.0, 4.0]]]])
        w = np.array([[[[1.0, 0.0], [0.0, 1.0]]]])
        # 2x2 kernels are not part of the detector but the arithmetic is generic
        out = ad.conv2d(Tensor(x), Tensor(w), Tensor(np.zeros(1)))
        np.testing.assert_array_equal(out.data, [[[[5.0]]]])

    def test_matches_direct_loop(self):
        rng = np.random.default_rng(1)
        x = rng.normal(size=(2, 3, 7, 7))
        w = rng.normal(size=(4, 3, 3, 3))
        b = rng.normal(size=4)
        out = ad.conv2d(Tensor(x), Tensor(w), Tensor(b), 2, 1).data
        xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
        ref = np.zeros((2, 4, 4, 4))
        for i in range(4):
            for j in range(4):
                patch = xp[:, :, 2 * i : 2 * i + 3, 2 * j : 2 * j + 3]
                ref[:, :, i, j] = np.einsum("nchw,ochw->no", patch, w) + b
        np.testing.assert_allclose(out, ref, atol=1e-12)

    def test_identity_block_is_exact(self):
        rng = np.random.default_rng(2)
        x = rng.normal(size=(2, 5, 4, 4))
        w = np.eye(5).reshape(5, 5, 1, 1)
        out = ad.conv2d(Tensor(x), Tensor(w), Tensor(np.zeros(5)))
        np.testing.assert_array_equal(out.data, x)

    def test_channel_mismatch(self):
        with pytest.raises(ConfigurationError):
            ad.conv2d(Tensor(np.zeros((1, 2, 4, 4))), Tensor(np.zeros((1, 3, 3, 3))), Tensor(np.zeros(1)))

    def test_tracked_if_any_input_tracked(self):
        x = Tensor(np.ones((1, 1, 3, 3)))
        w = leaf(np.ones((1, 1, 3, 3)))
        assert ad.conv2d(x, w, Tensor(np.zeros(1)), 1, 1).tracked
        assert not ad.conv2d(x, Tensor(w.data), Tensor(np.zeros(1)), 1, 1).tracked


class TestElementwise:
    def test_relu_sign_cases(self):
        np.testing.assert_array_equal(ad.relu(Tensor([-1.0, 2.0])).data, [0.0, 2.0])

    def test_sigmoid_symmetry_point(self):
        assert ad.sigmoid(Tensor(0.0)).item() == 0.5

    def test_exp_log_inverse(self):
        assert abs(ad.exp(Tensor(math.log(3.0))).item() - 3.0) <= 1e-12

    def test_sigmoid_saturates_without_overflow(self):
        with np.errstate(over="raise"):
            s = ad.sigmoid(Tensor([-1000.0, 1000.0])).data
        np.testing.assert_array_equal(s, [0.0, 1.0])

    def test_shape_mismatch(self):
        with pytest.raises(ConfigurationError):
            ad.add(Tensor(np.zeros(3)), Tensor(np.zeros(4)))

    def test_scalar_broadcast(self):
        out = ad.mul(Tensor(np.arange(3.0)), Tensor(2.0))
        np.testing.assert_array_equal(out.data, [0.0, 2.0, 4.0])


class TestBackward:
    def test_sum_gives_ones(self):
        x = leaf(np.arange(6.0).reshape(2, 3))
        ad.backward(ad.tsum(x))
        np.testing.assert_array_equal(x.grad, np.ones((2, 3)))

    def test_sum_of_squares(self):
        x = leaf([1.0, -2.0, 0.5])
        ad.backward(ad.tsum(ad.square(x)))
        np.testing.assert_array_equal(x.grad, [2.0, -4.0, 1.0])

    def test_conv_relu_sum_against_finite_differences(self):
        rng = np.random.default_rng(3)
        w = rng.normal(size=(2, 1, 3, 3))
        f = lambda t: ad.tsum(ad.relu(ad.conv2d(t, Tensor(w), Tensor(np.zeros(2)), 1, 1)))
        assert ad.grad_check(f, rng.normal(size=(1, 1, 3, 3))) <= 1e-4

    def test_untracked_leaves_untouched(self):
        x, y = leaf([1.0, 2.0]), Tensor([3.0, 4.0])
        ad.backward(ad.tsum(ad.mul(x, y)))
        assert y.grad is None

    def test_non_scalar_loss(self):
        with pytest.raises(UsageError):
            ad.backward(leaf([1.0, 2.0]))

    def test_non_finite_gradient_names_parameter(self):
        # finite loss (1e10) whose derivative 1e310 overflows
        x = Tensor(np.array([1e-300]), tracked=True, name="backbone.conv1.weight")
        with np.errstate(over="ignore", invalid="ignore"):
            loss = ad.tsum(ad.mul(ad.mul(x, 1e300), 1e10))
            with pytest.raises(ExplosionError) as err:
                ad.backward(loss)
        assert err.value.param == "backbone.conv1.weight"

    def test_non_finite_loss(self):
        x = leaf([np.inf])
        with pytest.raises(ExplosionError):
            ad.backward(ad.tsum(x))

    def test_tape_is_topological_and_single_visit(self):
        x = leaf(np.ones((2, 2)))
        y = ad.mul(x, x)
        loss = ad.tsum(ad.add(y, ad.relu(y)))
        tape = ad.backward(loss)
        position = {}
        for i, (_, _, out) in enumerate(tape.records):
            position[out] = i
        for i, (_, inputs, out) in enumerate(tape.records):
            for inp in inputs:
                assert position.get(inp, -1) < i
        outs = [r[2] for r in tape.records]
        assert len(outs) == len(set(outs))

    def test_repeated_backward_is_bitwise_equal(self):
        rng = np.random.default_rng(4)
        xv = rng.normal(size=(1, 2, 6, 6))
        w = rng.normal(size=(3, 2, 3, 3))
        grads = []
        for _ in range(2):
            x = leaf(xv)
            ad.backward(ad.tsum(ad.sigmoid(ad.conv2d(x, Tensor(w), Tensor(np.zeros(3)), 2, 1))))
            grads.append(x.grad)
        assert grads[0].tobytes() == grads[1].tobytes()


class TestGradCheck:
    def test_linear_function(self):
        x = np.random.default_rng(5).normal(size=7)
        assert ad.grad_check(ad.tsum, x) <= 1e-10

    def test_sigmoid_sum(self):
        x = np.random.default_rng(6).uniform(-2, 2, size=10)
        assert ad.grad_check(lambda t: ad.tsum(ad.sigmoid(t)), x) <= 1e-4

    def test_constant_function(self):
        assert ad.grad_check(lambda t: Tensor(1.0), np.ones(3)) == 0.0

    def test_non_finite_comparison_is_infinite(self):
        with np.errstate(all="ignore"):
            assert ad.grad_check(lambda t: ad.tsum(ad.exp(t)), np.array([800.0])) == math.inf


@pytest.mark.parametrize("name", sorted(grad_catalogue()))
def test_gradient_of_every_op(name):
    make = grad_catalogue()[name]
    rng = np.random.default_rng(zlib.crc32(name.encode()))
    for _ in range(5):
        f, x = make(rng)
        assert ad.grad_check(f, x) <= 1e-4


class TestFusedLosses:
    def test_bce_matches_formula(self):
        z, t = np.array([-1.5, 0.0, 2.0]), np.array([0.0, 0.3, 1.0])
        p = 1 / (1 + np.exp(-z))
        ref = -(t * np.log(p) + (1 - t) * np.log(1 - p))
        np.testing.assert_allclose(ad.bce_with_logits(Tensor(z), t).data, ref, rtol=1e-12)

    def test_focal_matches_formula(self):
        z, t = np.array([-1.5, 0.4, 2.0]), np.array([0.0, 1.0, 1.0])
        p = 1 / (1 + np.exp(-z))
        pt = np.where(t == 1, p, 1 - p)
        at = np.where(t == 1, 0.25, 0.75)
        ref = -at * (1 - pt) ** 2 * np.log(pt)
        np.testing.assert_allclose(ad.sigmoid_focal_loss(Tensor(z), t).data, ref, rtol=1e-12)

    def test_focal_gradient_in_saturated_tails(self):
        # finite differences lose all precision out here, so compare with the closed-form derivative
        z = np.linspace(-12, 12, 49)
        for target in (0.0, 1.0):
            t = np.full_like(z, target)
            x = leaf(z)
            ad.backward(ad.tsum(ad.sigmoid_focal_loss(x, t)))
            p, q = 1 / (1 + np.exp(-z)), 1 / (1 + np.exp(z))
            if target:
                ref = 0.25 * q**2 * (2 * p * -np.log1p(np.exp(-z)) - q)
            else:
                ref = -0.75 * p**2 * (2 * q * -np.log1p(np.exp(z)) - p)
            np.testing.assert_allclose(x.grad, ref, rtol=1e-10, atol=0)

    def test_iou_of_doubled_box(self):
        # predicted sides twice the target: areas 4x, target fully inside
        t = np.array([[2.0, 3.0, 4.0, 1.0]])
        out = ad.iou_loss(Tensor(2 * t), t)
        np.testing.assert_allclose(out.data, [1.0 - 0.25], rtol=1e-12)

    def test_huber_gradient_clipped(self):
        x = leaf([1.0])
        ad.backward(ad.tsum(ad.huber_penalty(x, np.array([0.0]), np.array([1e8]), 1.0, 10.0)))
        assert x.grad[0] == 10.0


@settings(max_examples=40, deadline=None)
@given(hnp.arrays(np.float64, st.integers(1, 6), elements=st.floats(-5, 5)))
def test_sigmoid_stays_in_unit_interval(x):
    s = ad.sigmoid(Tensor(x)).data
    assert np.all((s >= 0) & (s <= 1))


@settings(max_examples=40, deadline=None)
@given(
    hnp.arrays(np.float64, (2, 3), elements=st.floats(-3, 3)),
    hnp.arrays(np.float64, (2, 3), elements=st.floats(-3, 3)),
)
def test_add_mul_gradients_are_analytic(a, b):
    x, y = leaf(a), leaf(b)
    ad.backward(ad.tsum(ad.add(ad.mul(x, y), x)))
    np.testing.assert_array_equal(x.grad, b + 1.0)
    np.testing.assert_array_equal(y.grad, a)
