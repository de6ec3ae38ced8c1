"""Tensor/tape unit tests.

The analytic backward rules are checked against central finite differences,
and matmul against an index-by-index triple loop, so the gradients and the
library forward path are validated by independent arithmetic.
"""

import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra import numpy as hnp

from physloc import numerics as nx
from physloc.errors import (
    ContractError,
    DegenerateInputError,
    DimensionError,
    NumericError,
)


def naive_matmul(a, b):
    """Triple-loop oracle, no numpy dot involved."""
    m, k = a.shape
    k2, n = b.shape
    assert k == k2
    out = np.zeros((m, n))
    for i in range(m):
        for j in range(n):
            acc = 0.0
            for t in range(k):
                acc += a[i, t] * b[t, j]
            out[i, j] = acc
    return out


class TestForward:
    def test_matmul_identity(self):
        a = np.array([[1.0, 2.0], [3.0, 4.0]])
        out = nx.matmul(a, np.eye(2))
        assert np.array_equal(out.data, a)

    def test_matmul_against_triple_loop(self):
        rng = np.random.default_rng(0)
        for _ in range(20):
            m, k, n = rng.integers(1, 6, size=3)
            a = rng.normal(size=(m, k))
            b = rng.normal(size=(k, n))
            got = nx.matmul(a, b).data
            assert np.allclose(got, naive_matmul(a, b), atol=1e-12)

    def test_matmul_shape_errors(self):
        with pytest.raises(DimensionError):
            nx.matmul(np.zeros((2, 3)), np.zeros((2, 3)))
        with pytest.raises(DimensionError):
            nx.matmul(np.zeros(3), np.zeros((3, 2)))

    def test_softmax_uniform(self):
        out = nx.softmax(np.zeros(4))
        assert np.allclose(out.data, 0.25, atol=1e-15)

    def test_softmax_large_inputs_stable(self):
        out = nx.softmax(np.array([1000.0, 1000.0]))
        assert np.allclose(out.data, 0.5, atol=1e-15)

    def test_softmax_empty_axis(self):
        with pytest.raises(DimensionError):
            nx.softmax(np.zeros((3, 0)), axis=-1)

    @settings(max_examples=40, deadline=None)
    @given(
        hnp.arrays(
            np.float64,
            hnp.array_shapes(min_dims=1, max_dims=1, min_side=1, max_side=16),
            elements=st.floats(-50, 50),
        )
    )
    def test_softmax_sums_to_one(self, x):
        out = nx.softmax(x).data
        assert abs(out.sum() - 1.0) < 1e-12
        assert np.all(out >= 0)

    @settings(max_examples=40, deadline=None)
    @given(
        hnp.arrays(
            np.float64, 8, elements=st.floats(-50, 50)
        ),
        st.floats(-30, 30),
    )
    def test_softmax_shift_invariant(self, x, c):
        a = nx.softmax(x).data
        b = nx.softmax(x + c).data
        assert np.allclose(a, b, atol=1e-12)

    def test_layernorm_zero_mean_unit_scale(self):
        x = np.array([1.0, 2.0, 3.0, 4.0])
        out = nx.layernorm(x, np.ones(4), np.zeros(4), eps=1e-12).data
        assert abs(out.mean()) < 1e-12
        assert abs(out.std() - 1.0) < 1e-6

    def test_layernorm_constant_row_guarded_by_eps(self):
        out = nx.layernorm(np.full(5, 3.0), np.ones(5), np.zeros(5)).data
        assert np.allclose(out, 0.0)

    def test_l2_normalize(self):
        out = nx.l2_normalize(np.array([3.0, 4.0]))
        assert np.allclose(out.data, [0.6, 0.8], atol=1e-15)

    def test_l2_normalize_zero_vector(self):
        with pytest.raises(DegenerateInputError):
            nx.l2_normalize(np.zeros(2))

    def test_l2_normalize_rows_zero_row_named(self):
        x = np.array([[1.0, 0.0], [0.0, 0.0]])
        with pytest.raises(DegenerateInputError, match="row 1"):
            nx.l2_normalize_rows(x)

    def test_cosine_sim_orthogonal(self):
        out = nx.cosine_sim(np.array([1.0, 0.0]), np.array([0.0, 2.0]))
        assert out.item() == pytest.approx(0.0, abs=1e-15)

    def test_cosine_sim_scale_invariant(self):
        a = np.array([1.0, 2.0, -1.0])
        s1 = nx.cosine_sim(a, a * 3.0).item()
        assert s1 == pytest.approx(1.0, abs=1e-12)

    def test_log_of_nonpositive_raises(self):
        with pytest.raises(NumericError):
            nx.log(np.array([0.0]))

    def test_div_by_zero_raises(self):
        with pytest.raises(NumericError):
            nx.div(np.array([1.0]), np.array([0.0]))

    def test_tensor_rejects_nonfinite(self):
        with pytest.raises(NumericError):
            nx.Tensor([np.inf])

    def test_tensor_is_immutable(self):
        t = nx.Tensor([1.0, 2.0])
        with pytest.raises(ValueError):
            t.data[0] = 5.0


class TestBackward:
    def test_square_gradient(self):
        with nx.GradientTape() as tape:
            x = nx.Tensor(3.0)
            tape.watch(x, "x")
            y = nx.mul(x, x)
        grads = nx.backward(tape, y)
        assert grads["x"] == pytest.approx(6.0)

    def test_matmul_gradient_shapes(self):
        with nx.GradientTape() as tape:
            a = nx.Tensor(np.arange(6, dtype=float).reshape(2, 3))
            b = nx.Tensor(np.arange(12, dtype=float).reshape(3, 4))
            tape.watch(a, "a")
            tape.watch(b, "b")
            loss = nx.sum_(nx.matmul(a, b))
        grads = nx.backward(tape, loss)
        assert grads["a"].shape == (2, 3)
        assert grads["b"].shape == (3, 4)
        # d(sum AB)/dA = ones @ B^T
        assert np.allclose(grads["a"], np.ones((2, 4)) @ b.data.T)

    def test_unused_parameter_gets_exact_zero(self):
        with nx.GradientTape() as tape:
            x = nx.Tensor([1.0, 2.0])
            z = nx.Tensor([5.0, 5.0])
            tape.watch(x, "x")
            tape.watch(z, "unused")
            loss = nx.sum_(nx.mul(x, x))
        grads = nx.backward(tape, loss)
        assert np.array_equal(grads["unused"], np.zeros(2))

    def test_shared_parameter_accumulates(self):
        with nx.GradientTape() as tape:
            x = nx.Tensor(2.0)
            tape.watch(x, "x")
            loss = nx.add(nx.mul(x, x), nx.mul(x, x))
        grads = nx.backward(tape, loss)
        assert grads["x"] == pytest.approx(8.0)

    def test_non_scalar_loss_rejected(self):
        with nx.GradientTape() as tape:
            x = nx.Tensor([1.0, 2.0])
            tape.watch(x, "x")
            y = nx.mul(x, x)
        with pytest.raises(ContractError):
            nx.backward(tape, y)

    def test_nested_tape_rejected(self):
        with nx.GradientTape():
            with pytest.raises(ContractError):
                with nx.GradientTape():
                    pass

    def test_each_record_visited_once(self):
        # A diamond-shaped graph: y = (x*x) + (x*x reused). If the tape
        # revisited records the shared-node gradient would double.
        with nx.GradientTape() as tape:
            x = nx.Tensor(3.0)
            tape.watch(x, "x")
            sq = nx.mul(x, x)
            loss = nx.add(sq, sq)
        grads = nx.backward(tape, loss)
        assert grads["x"] == pytest.approx(12.0)


FDC_CASES = {
    "add": lambda t: nx.sum_(nx.add(t, nx.Tensor(np.linspace(0.5, 1.5, t.size).reshape(t.shape)))),
    "sub": lambda t: nx.sum_(nx.mul(nx.sub(t, 0.3), nx.sub(t, 0.3))),
    "mul_broadcast": lambda t: nx.sum_(nx.mul(t, nx.Tensor(np.linspace(1, 2, t.shape[-1])))),
    "div": lambda t: nx.sum_(nx.div(t, nx.Tensor(np.linspace(1.0, 3.0, t.size).reshape(t.shape)))),
    "exp": lambda t: nx.sum_(nx.exp(nx.mul(t, 0.3))),
    "log": lambda t: nx.sum_(nx.log(nx.add(nx.mul(t, t), 1.0))),
    "tanh": lambda t: nx.sum_(nx.tanh(t)),
    "softmax": lambda t: nx.sum_(nx.mul(nx.softmax(t, axis=-1), nx.Tensor(np.linspace(0, 1, t.size).reshape(t.shape)))),
    "mean": lambda t: nx.mean(nx.mul(t, t)),
    "transpose": lambda t: nx.sum_(nx.mul(nx.transpose(t), nx.transpose(t))),
    "reshape": lambda t: nx.sum_(nx.mul(nx.reshape(t, (t.size,)), 2.0)),
    "slice": lambda t: nx.sum_(nx.mul(nx.slice_rows(t, 1, 3), 1.5)),
    "tile": lambda t: nx.sum_(nx.tanh(nx.tile_rows(t, 3))),
}


class TestFiniteDifferences:
    def test_quadratic_example(self):
        # f(x) = x^2 at x = 3: analytic 6, central difference agrees to ~1e-8.
        err = nx.finite_diff_check(lambda t: nx.mul(t, t), nx.Tensor(3.0), h=1e-5)
        assert err < 1e-8

    @pytest.mark.parametrize("name", sorted(FDC_CASES))
    def test_op_gradients(self, name):
        rng = np.random.default_rng(7)
        theta = rng.normal(size=(4, 3)) * 0.8
        err = nx.finite_diff_check(FDC_CASES[name], nx.Tensor(theta), h=1e-5)
        assert err < 1e-6, f"{name}: {err}"

    def test_layernorm_gradients(self):
        rng = np.random.default_rng(3)
        x0 = rng.normal(size=(2, 5))
        gamma0 = rng.normal(size=5)
        beta0 = rng.normal(size=5)

        probe = nx.Tensor(rng.normal(size=(2, 5)))
        err_x = nx.finite_diff_check(
            lambda t: nx.sum_(nx.mul(nx.layernorm(t, nx.Tensor(gamma0), nx.Tensor(beta0)), probe)),
            nx.Tensor(x0),
        )
        assert err_x < 1e-6
        err_g = nx.finite_diff_check(
            lambda t: nx.sum_(nx.tanh(nx.layernorm(nx.Tensor(x0), t, nx.Tensor(beta0)))),
            nx.Tensor(gamma0),
        )
        assert err_g < 1e-6

    def test_l2_normalize_gradients(self):
        err = nx.finite_diff_check(
            lambda t: nx.sum_(nx.mul(nx.l2_normalize(t), nx.Tensor([0.2, -0.5, 1.0]))),
            nx.Tensor([1.0, -2.0, 0.5]),
        )
        assert err < 1e-6

    def test_l2_normalize_rows_gradients(self):
        rng = np.random.default_rng(11)
        x = rng.normal(size=(3, 4)) + 0.5
        w = rng.normal(size=(3, 4))
        err = nx.finite_diff_check(
            lambda t: nx.sum_(nx.mul(nx.l2_normalize_rows(t), nx.Tensor(w))), nx.Tensor(x)
        )
        assert err < 1e-6

    def test_cosine_sim_gradients(self):
        b = np.array([0.3, -1.0, 0.7])
        err = nx.finite_diff_check(
            lambda t: nx.cosine_sim(t, nx.Tensor(b)), nx.Tensor([1.0, 0.5, -0.2])
        )
        assert err < 1e-6

    def test_gather_rows_gradients(self):
        idx = np.array([0, 2, 2, 1])
        w = np.random.default_rng(5).normal(size=(4, 3))
        err = nx.finite_diff_check(
            lambda t: nx.sum_(nx.mul(nx.gather_rows(t, idx), nx.Tensor(w))),
            nx.Tensor(np.random.default_rng(6).normal(size=(3, 3))),
        )
        assert err < 1e-6

    def test_stack_rows_gradients(self):
        def f(t):
            a = nx.slice_rows(t, 0, 1)
            b = nx.slice_rows(t, 1, 2)
            stacked = nx.stack_rows([a, b])
            return nx.sum_(nx.mul(stacked, stacked))

        err = nx.finite_diff_check(f, nx.Tensor(np.array([[1.0, 2.0], [3.0, 4.0]])))
        assert err < 1e-6

    def test_matmul_chain_gradients(self):
        rng = np.random.default_rng(13)
        b = rng.normal(size=(3, 2))

        def f(t):
            h = nx.tanh(nx.matmul(t, nx.Tensor(b)))
            return nx.mean(nx.mul(h, h))

        err = nx.finite_diff_check(f, nx.Tensor(rng.normal(size=(2, 3))))
        assert err < 1e-6


class TestGatherSliceStack:
    def test_gather_rows_values(self):
        table = np.arange(12, dtype=float).reshape(4, 3)
        out = nx.gather_rows(table, np.array([3, 0]))
        assert np.array_equal(out.data, table[[3, 0]])

    def test_gather_rows_out_of_range(self):
        with pytest.raises(DimensionError):
            nx.gather_rows(np.zeros((2, 2)), np.array([2]))

    def test_slice_rows_bounds(self):
        with pytest.raises(DimensionError):
            nx.slice_rows(np.zeros((2, 2)), 1, 1)

    def test_stack_rows_mixed_inputs(self):
        out = nx.stack_rows([np.array([1.0, 2.0]), nx.Tensor([[3.0, 4.0]])])
        assert np.array_equal(out.data, [[1.0, 2.0], [3.0, 4.0]])

    def test_tile_rows_values(self):
        out = nx.tile_rows(np.array([[1.0, 2.0]]), 3)
        assert out.shape == (3, 2)
        assert np.array_equal(out.data, np.tile([[1.0, 2.0]], (3, 1)))
