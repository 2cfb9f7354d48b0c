import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from parlab import tensor as T
from parlab.tensor import Tensor, grad_check


def leaf(data):
    return Tensor(np.asarray(data, dtype=np.float64), requires_grad=True)


class TestMatmul:
    """Batched matrix product and its gradient."""

    def test_identity(self):
        out = T.matmul(Tensor(np.eye(2)), Tensor([[1.0, 2.0], [3.0, 4.0]]))
        np.testing.assert_array_equal(out.data, [[1, 2], [3, 4]])

    def test_hand_product(self):
        assert T.matmul(Tensor([[1.0, 2.0]]), Tensor([[3.0], [4.0]])).data.tolist() == [[11.0]]

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            T.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))

    def test_grad(self, rng):
        a, b = leaf(rng.normal(size=(3, 3))), leaf(rng.normal(size=(3, 3)))
        assert grad_check(lambda: T.matmul(a, b).sum(), [a, b]) < 1e-6

    def test_identity_associativity_bitwise(self, rng):
        a, b, eye = (Tensor(rng.normal(size=(4, 4))), Tensor(rng.normal(size=(4, 4))), Tensor(np.eye(4)))
        lhs = T.matmul(T.matmul(a, eye), b)
        rhs = T.matmul(a, T.matmul(eye, b))
        assert np.array_equal(lhs.data, rhs.data)


class TestPointwise:
    """Elementwise ops against numpy."""

    def test_closed_forms(self):
        assert T.sigmoid(Tensor(0.0)).item() == 0.5
        np.testing.assert_allclose(T.softmax(Tensor([0.0, 0.0, 0.0])).data, [1 / 3] * 3)
        assert abs(T.softplus(Tensor(0.0)).item() - math.log(2)) < 1e-15

    def test_sigmoid_extremes_finite(self):
        out = T.sigmoid(Tensor([-1000.0, 1000.0])).data
        np.testing.assert_array_equal(out, [0.0, 1.0])

    def test_softplus_large_input(self):
        assert T.softplus(Tensor(800.0)).item() == 800.0

    @pytest.mark.parametrize("op", ["add", "mul", "div", "sub"])
    def test_binary_grads(self, op, rng):
        a = leaf(rng.normal(size=(3, 4)))
        b = leaf(rng.uniform(0.5, 2.0, size=(1, 4)))
        f = {"add": T.add, "mul": T.mul, "div": T.div, "sub": T.sub}[op]
        assert grad_check(lambda: (f(a, b) * f(a, b)).sum(), [a, b]) < 1e-5

    @pytest.mark.parametrize("fn", [T.sigmoid, T.silu, T.softplus, T.exp, T.tanh, T.gelu])
    def test_unary_grads(self, fn, rng):
        x = leaf(rng.normal(size=(2, 5)))
        w = Tensor(rng.normal(size=(2, 5)))
        assert grad_check(lambda: (fn(x) * w).sum(), [x]) < 1e-5

    def test_log_grad(self, rng):
        x = leaf(rng.uniform(0.5, 2.0, size=(6,)))
        assert grad_check(lambda: T.log(x).sum(), [x]) < 1e-6

    def test_layer_norm_stats(self, rng):
        x = Tensor(rng.normal(3.0, 5.0, size=(7, 16)))
        y = T.layer_norm(x).data
        assert np.abs(y.mean(-1)).max() < 1e-9
        assert np.abs(y.var(-1) - 1).max() < 1e-6

    def test_layer_norm_constant_row(self):
        y = T.layer_norm(Tensor(np.full((2, 4), 3.0))).data
        assert np.all(np.isfinite(y)) and np.all(y == 0)

    def test_layer_norm_grad(self, rng):
        x, g, b = leaf(rng.normal(size=(3, 4))), leaf(rng.normal(size=4)), leaf(rng.normal(size=4))
        w = Tensor(rng.normal(size=(3, 4)))
        assert grad_check(lambda: (T.layer_norm(x, g, b) * w).sum(), [x, g, b]) < 1e-5

    def test_softmax_grad(self, rng):
        x = leaf(rng.normal(size=(2, 5)))
        w = Tensor(rng.normal(size=(2, 5)))
        assert grad_check(lambda: (T.softmax(x, axis=-1) * w).sum(), [x]) < 1e-5

    @settings(max_examples=50, deadline=None)
    @given(arrays(np.float64, st.tuples(st.integers(1, 4), st.integers(1, 6)),
                  elements=st.floats(-50, 50)))
    def test_softmax_rows(self, x):
        p = T.softmax(Tensor(x), axis=-1).data
        assert np.all(p >= 0)
        assert np.abs(p.sum(-1) - 1).max() < 1e-12


class TestConv:
    """Depthwise causal 1-D convolution."""

    def test_identity_kernel(self, rng):
        x = rng.normal(size=(5, 3))
        y = T.conv1d_causal_depthwise(Tensor(x), Tensor(np.ones((1, 3))), Tensor(np.zeros(3)))
        np.testing.assert_array_equal(y.data, x)

    def test_hand_case(self):
        y = T.conv1d_causal_depthwise(Tensor([[1.0], [2.0]]), Tensor([[1.0], [1.0]]), Tensor([0.0]))
        assert y.data[:, 0].tolist() == [1.0, 3.0]

    def test_causal(self, rng):
        x = rng.normal(size=(8, 2))
        w, b = Tensor(rng.normal(size=(4, 2))), Tensor(rng.normal(size=2))
        y0 = T.conv1d_causal_depthwise(Tensor(x), w, b).data
        x[5] += 1.0
        y1 = T.conv1d_causal_depthwise(Tensor(x), w, b).data
        np.testing.assert_array_equal(y0[:5], y1[:5])
        assert np.all(y0[5] != y1[5])

    def test_grad(self, rng):
        x, w, b = leaf(rng.normal(size=(2, 6, 3))), leaf(rng.normal(size=(4, 3))), leaf(rng.normal(size=3))
        r = Tensor(rng.normal(size=(2, 6, 3)))
        assert grad_check(lambda: (T.conv1d_causal_depthwise(x, w, b) * r).sum(), [x, w, b]) < 1e-6


class TestShapeOps:
    """Reshape, transpose, slicing and concatenation."""

    def test_getitem_scatter(self, rng):
        x = leaf(rng.normal(size=(5, 3)))
        idx = np.array([0, 2, 2, 4])
        grad_err = grad_check(lambda: (x[idx] * x[idx]).sum(), [x])
        assert grad_err < 1e-6

    def test_split_concat_round_trip(self, rng):
        x = leaf(rng.normal(size=(2, 7)))
        parts = T.split(x, [3, 4], axis=-1)
        np.testing.assert_array_equal(T.concat(parts, axis=-1).data, x.data)
        w = Tensor(rng.normal(size=(2, 7)))
        assert grad_check(lambda: (T.concat(T.split(x, [3, 4]), axis=-1) * w).sum(), [x]) < 1e-6

    def test_transpose_flip_reshape(self, rng):
        x = leaf(rng.normal(size=(2, 3, 4)))
        w = Tensor(rng.normal(size=(4, 6)))
        f = lambda: (T.flip(x.transpose(2, 0, 1), 1).reshape(4, 6) * w).sum()
        assert grad_check(f, [x]) < 1e-6

    def test_broadcast_unbroadcast(self, rng):
        a, b = leaf(rng.normal(size=(3, 1, 4))), leaf(rng.normal(size=(5, 1)))
        assert grad_check(lambda: ((a + b) * (a * b)).sum(), [a, b]) < 1e-6

    def test_mean_axes(self, rng):
        x = leaf(rng.normal(size=(2, 3, 4)))
        assert grad_check(lambda: (x.mean(axis=(0, 2)) ** 2).sum(), [x]) < 1e-6


class TestBackward:
    """Graph traversal and gradient accumulation."""

    def test_sum_grad_ones(self, rng):
        x = leaf(rng.normal(size=(2, 3)))
        x.sum().backward()
        np.testing.assert_array_equal(x.grad, np.ones((2, 3)))

    def test_square(self):
        x = leaf([3.0])
        (x * x).sum().backward()
        assert x.grad.tolist() == [6.0]

    def test_accumulates(self, rng):
        x = leaf(rng.normal(size=4))
        (x * x).sum().backward()
        first = x.grad.copy()
        (x * x).sum().backward()
        np.testing.assert_array_equal(x.grad, 2 * first)

    def test_non_scalar_rejected(self):
        with pytest.raises(ValueError):
            (leaf([1.0, 2.0]) * 2).backward()

    def test_shared_subexpression(self):
        x = leaf([2.0])
        y = x * x
        (y + y * y).sum().backward()
        # d/dx (x^2 + x^4) = 2x + 4x^3
        assert x.grad.tolist() == [4.0 + 32.0]

    def test_deep_chain_no_recursion_limit(self):
        x = leaf([1.0])
        y = x
        for _ in range(5000):
            y = y * 1.0
        y.sum().backward()
        assert x.grad.tolist() == [1.0]

    def test_no_grad_records_nothing(self):
        x = leaf([1.0])
        with T.no_grad():
            y = x * 2
        assert y._parents == () and not y.requires_grad


class TestGradCheck:
    """Finite-difference checker."""

    def test_self_test_sigmoid(self, rng):
        x = leaf(rng.normal(size=8))
        assert grad_check(lambda t: T.sigmoid(t).sum(), x, h=1e-5) < 1e-6

    def test_linear_exact(self, rng):
        x = leaf(rng.normal(size=8))
        c = Tensor(rng.normal(size=8))
        assert grad_check(lambda t: (t * c).sum(), x) < 1e-10

    def test_detects_wrong_gradient(self, rng):
        x = leaf(rng.normal(size=4))

        def bad(t):
            return T.make_op(t.data ** 2, (t,), lambda g: (g * 3 * t.data,), "bad").sum()

        assert grad_check(bad, x) > 0.1

    @settings(max_examples=25, deadline=None)
    @given(st.integers(1, 16), st.integers(0, 2**31 - 1))
    def test_random_small_shapes(self, n, seed):
        rng = np.random.default_rng(seed)
        x = leaf(rng.normal(size=n))
        w = Tensor(rng.normal(size=n))
        f = lambda: (T.silu(x) * w + T.softplus(x) * T.sigmoid(x)).sum()
        assert grad_check(f, [x]) < 1e-5


class TestCheckFinite:
    """Non-finite values are reported, not propagated."""

    def test_names_first_bad_tensor(self):
        x = Tensor([1.0, -1.0], requires_grad=True, name="inputs")
        with np.errstate(invalid="ignore"):
            z = T.log(x) * 2.0
        with pytest.raises(T.NonFiniteError, match="log"), np.errstate(invalid="ignore"):
            T.check_finite(z, "loss")

    def test_finite_passes(self):
        T.check_finite(Tensor([1.0, 2.0]))


class TestAdam:
    """Adam optimizer."""

    def test_first_step(self):
        p = leaf([0.0])
        state = T.AdamState(lr=1e-3)
        T.adam_step([p], [np.array([1.0])], state)
        assert abs(abs(p.data[0]) - 1e-3 / (1 + 1e-8)) < 1e-15
        assert state.t == 1

    def test_zero_grad_no_change(self):
        p = leaf([0.5])
        state = T.AdamState()
        T.adam_step([p], [np.array([0.0])], state)
        assert p.data[0] == 0.5 and state.t == 1

    def test_two_steps(self):
        p = leaf([0.0])
        state = T.AdamState(lr=1e-3)
        prev = 0.0
        for _ in range(2):
            T.adam_step([p], [np.array([1.0])], state)
            step = abs(p.data[0] - prev)
            assert 0.9e-3 <= step <= 1.0e-3
            prev = p.data[0]

    def test_does_not_zero_grads(self):
        p = leaf([1.0])
        p.grad = np.array([2.0])
        opt = T.Adam([p])
        opt.step()
        assert p.grad is not None

    def test_minimizes_quadratic(self):
        p = leaf([5.0, -3.0])
        opt = T.Adam([p], lr=0.1)
        for _ in range(500):
            opt.zero_grad()
            (p * p).sum().backward()
            opt.step()
        assert np.abs(p.data).max() < 1e-2


class TestDtype:
    """Default dtype switching."""

    def test_context_restores(self):
        with T.default_dtype(np.float32):
            assert Tensor([1.0]).dtype == np.float32
        assert Tensor([1.0]).dtype == np.float64

    def test_rejects_other_dtypes(self):
        with pytest.raises(ValueError):
            T.set_default_dtype(np.int32)
