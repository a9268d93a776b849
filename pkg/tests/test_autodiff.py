"""Backward pass: trivial gradients, linearity, finite-difference oracles."""

import numpy as np
import pytest

from zestdiff import tensor as tz
from zestdiff.tensor import NumericalError, ShapeError, Tensor


def p64(data):
    return Tensor(np.asarray(data, dtype=np.float64), requires_grad=True)


class TestBackwardBasics:
    def test_sum_gives_ones(self):
        x = p64(np.random.default_rng(0).normal(size=(2, 2)))
        tz.backward(tz.tsum(x))
        np.testing.assert_array_equal(x.grad, np.ones((2, 2)))

    def test_square_gives_two_x(self):
        x = p64([3.0])
        tz.backward(tz.tsum(tz.mul(x, x)))
        np.testing.assert_allclose(x.grad, [6.0])

    def test_non_scalar_loss_rejected(self):
        x = p64(np.ones((2, 2)))
        with pytest.raises(ShapeError, match="scalar"):
            tz.backward(tz.mul(x, x))

    def test_gradient_map_and_leaf_shapes(self):
        x = p64(np.ones((3, 2)))
        y = Tensor(np.ones((3, 2)))  # non-grad leaf
        grads = tz.backward(tz.tsum(tz.mul(x, y)))
        assert x in grads and y not in grads
        assert grads[x].shape == x.shape
        assert y.grad is None

    def test_linearity_of_backward(self):
        rng = np.random.default_rng(4)
        xv = rng.normal(size=(3, 3))
        w = Tensor(rng.normal(size=(3, 3)))

        def loss_a(x):
            return tz.mean(tz.mul(tz.matmul(x, w), tz.matmul(x, w)))

        def loss_b(x):
            return tz.tsum(tz.silu(x))

        x1 = p64(xv)
        tz.backward(tz.add(loss_a(x1), loss_b(x1)))
        x2 = p64(xv)
        tz.backward(loss_a(x2))
        x3 = p64(xv)
        tz.backward(loss_b(x3))
        np.testing.assert_allclose(x1.grad, x2.grad + x3.grad, rtol=1e-12)

    def test_reuse_accumulates(self):
        x = p64([2.0])
        y = tz.add(tz.mul(x, x), tz.mul(x, Tensor(np.array(3.0))))
        tz.backward(tz.tsum(y))
        np.testing.assert_allclose(x.grad, [7.0])  # 2x + 3


class TestPerceptronOracle:
    def test_two_layer_perceptron_matches_fd(self):
        rng = np.random.default_rng(11)
        w1 = Tensor(rng.normal(size=(6, 8)) * 0.5)
        b1 = Tensor(rng.normal(size=(8,)) * 0.1)
        w2 = Tensor(rng.normal(size=(8, 1)) * 0.5)

        def f(x):
            h = tz.silu(tz.add(tz.matmul(x, w1), b1))
            return tz.tsum(tz.matmul(h, w2))

        x = Tensor(rng.normal(size=(4, 6)))
        assert tz.grad_check(f, x, eps=1e-5) <= 1e-4


class TestGradCheckContract:
    def test_sum_is_exact(self):
        x = Tensor(np.random.default_rng(0).normal(size=(3, 3)))
        assert tz.grad_check(tz.tsum, x, eps=1e-5) <= 1e-9

    def test_zero_eps_rejected(self):
        with pytest.raises(ValueError, match="eps"):
            tz.grad_check(tz.tsum, Tensor(np.ones(2)), eps=0.0)

    def test_nonfinite_reported_with_coordinate(self):
        def f(x):
            return tz.tsum(tz.div(x, tz.sub(x, x)))  # 0/0 everywhere

        with pytest.raises(NumericalError):
            tz.grad_check(f, Tensor(np.ones(3)), eps=1e-6)

    def test_composite_conv_gn_silu_chain(self):
        rng = np.random.default_rng(3)
        w = Tensor(rng.normal(size=(4, 4, 3, 3)) * 0.3)
        gamma = Tensor(rng.uniform(0.5, 1.5, size=4))
        beta = Tensor(rng.normal(size=4) * 0.1)

        def f(x):
            h = tz.conv2d(x, w, stride=1, pad=1)
            h = tz.group_norm(h, gamma, beta, groups=2)
            return tz.tsum(tz.silu(h))

        x = Tensor(rng.normal(size=(1, 4, 8, 8)))
        assert tz.grad_check(f, x, eps=1e-5) <= 1e-4


def _check(fn, x, tol=1e-4, eps=1e-5):
    assert tz.grad_check(fn, Tensor(np.asarray(x, dtype=np.float64)), eps) <= tol


class TestPerPrimitiveGradChecks:
    """Every primitive passes a 64-bit finite-difference check <= 1e-4."""

    rng = np.random.default_rng(20)

    def test_add_sub_mul_div_neg(self):
        other = Tensor(self.rng.uniform(0.5, 2.0, size=(3, 4)))
        _check(lambda x: tz.tsum(tz.add(x, other)), self.rng.normal(size=(3, 4)))
        _check(lambda x: tz.tsum(tz.sub(other, x)), self.rng.normal(size=(3, 4)))
        _check(lambda x: tz.tsum(tz.mul(x, other)), self.rng.normal(size=(3, 4)))
        _check(lambda x: tz.tsum(tz.div(x, other)), self.rng.normal(size=(3, 4)))
        _check(lambda x: tz.tsum(tz.div(other, x)),
               self.rng.uniform(1.0, 2.0, size=(3, 4)))
        _check(lambda x: tz.tsum(tz.neg(x)), self.rng.normal(size=(3, 4)))

    def test_scalar_and_broadcast(self):
        bias = Tensor(self.rng.normal(size=(4,)))
        _check(lambda x: tz.tsum(tz.mul(x, 2.5)), self.rng.normal(size=(2, 4)))
        _check(lambda x: tz.tsum(tz.add(x, bias)), self.rng.normal(size=(2, 4)))
        _check(lambda x: tz.tsum(tz.add(bias, x)), self.rng.normal(size=(2, 4)))

    def test_silu_softmax(self):
        _check(lambda x: tz.tsum(tz.silu(x)), self.rng.normal(size=(3, 5)))
        w = Tensor(self.rng.normal(size=(5,)))
        _check(lambda x: tz.tsum(tz.mul(tz.softmax(x, axis=1), w)),
               self.rng.normal(size=(3, 5)))

    def test_clamp_bce(self):
        _check(lambda x: tz.tsum(tz.clamp(x, -0.5, 0.5)),
               self.rng.uniform(-0.4, 0.4, size=(6,)))
        target = Tensor((self.rng.uniform(size=8) > 0.4).astype(np.float64))
        _check(lambda x: tz.tsum(tz.bce(x, target)),
               self.rng.uniform(0.1, 0.9, size=(8,)))

    def test_reductions(self):
        _check(lambda x: tz.tsum(tz.mul(tz.mean(x, axis=1), Tensor(np.arange(3.0)))),
               self.rng.normal(size=(3, 4)))
        _check(lambda x: tz.mean(x), self.rng.normal(size=(2, 3, 4)))
        x = self.rng.normal(size=(3, 4))  # distinct values: no max ties
        _check(lambda t: tz.tsum(tz.amax(t, axis=1)), x)
        _check(lambda t: tz.amax(t), x)

    def test_shape_ops(self):
        w = Tensor(self.rng.normal(size=(12,)))
        _check(lambda x: tz.tsum(tz.mul(tz.reshape(x, (12,)), w)),
               self.rng.normal(size=(3, 4)))
        _check(lambda x: tz.tsum(tz.silu(tz.permute(x, (1, 0, 2)))),
               self.rng.normal(size=(2, 3, 4)))
        other = Tensor(self.rng.normal(size=(2, 3)))
        _check(lambda x: tz.tsum(tz.silu(tz.concat([x, other], axis=0))),
               self.rng.normal(size=(2, 3)))
        _check(lambda x: tz.tsum(tz.silu(tz.select(x, 0, 1))),
               self.rng.normal(size=(3, 4)))

    def test_embedding(self):
        ids = np.array([0, 2, 2, 1])
        _check(lambda table: tz.tsum(tz.silu(tz.embedding(table, ids))),
               self.rng.normal(size=(4, 5)))

    def test_matmul_2d_3d(self):
        b = Tensor(self.rng.normal(size=(4, 3)))
        _check(lambda x: tz.tsum(tz.silu(tz.matmul(x, b))),
               self.rng.normal(size=(2, 4)))
        b3 = Tensor(self.rng.normal(size=(2, 4, 3)))
        _check(lambda x: tz.tsum(tz.silu(tz.matmul(x, b3))),
               self.rng.normal(size=(2, 3, 4)))
        a3 = Tensor(self.rng.normal(size=(2, 3, 4)))
        _check(lambda x: tz.tsum(tz.silu(tz.matmul(a3, x))),
               self.rng.normal(size=(4, 3)))

    def test_conv2d_variants(self):
        w = Tensor(self.rng.normal(size=(3, 2, 3, 3)) * 0.4)
        _check(lambda x: tz.tsum(tz.silu(tz.conv2d(x, w, stride=1, pad=1))),
               self.rng.normal(size=(2, 2, 5, 5)))
        _check(lambda x: tz.tsum(tz.silu(tz.conv2d(x, w, stride=2, pad=1))),
               self.rng.normal(size=(1, 2, 8, 8)))
        x0 = self.rng.normal(size=(1, 2, 6, 6))
        _check(lambda w_: tz.tsum(tz.silu(tz.conv2d(Tensor(x0), w_, stride=1,
                                                    pad=0))),
               self.rng.normal(size=(3, 2, 3, 3)) * 0.4)

    def test_upsample_and_resize(self):
        _check(lambda x: tz.tsum(tz.silu(tz.upsample_nearest2(x))),
               self.rng.normal(size=(1, 2, 3, 3)))
        _check(lambda x: tz.tsum(tz.silu(tz.bilinear_resize(x, 7, 5))),
               self.rng.normal(size=(2, 4, 4)))

    def test_group_norm_params(self):
        x0 = Tensor(self.rng.normal(size=(2, 4, 3, 3)))
        beta = Tensor(self.rng.normal(size=(4,)) * 0.1)
        gamma = Tensor(self.rng.uniform(0.5, 1.5, size=(4,)))
        _check(lambda g: tz.tsum(tz.silu(tz.group_norm(x0, g, beta, 2))),
               gamma.data)
        _check(lambda b: tz.tsum(tz.silu(tz.group_norm(x0, gamma, b, 2))),
               beta.data)
