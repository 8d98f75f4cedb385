import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from circuitseek import tensor as T
from circuitseek.tensor import ContractError, ShapeError, Tensor


def f64(x):
    return Tensor(np.asarray(x, dtype=np.float64), dtype=np.float64)


def brute_matmul(a, b):
    m, k = a.shape
    _, n = b.shape
    out = np.zeros((m, n))
    for i in range(m):
        for j in range(n):
            for t in range(k):
                out[i, j] += float(a[i, t]) * float(b[t, j])
    return out


class TestMatmul:
    def test_identity(self):
        b = np.arange(6, dtype=np.float32).reshape(3, 2)
        np.testing.assert_array_equal(T.matmul(np.eye(3), b).data, b)

    def test_scalar_case(self):
        assert T.matmul([[2.0]], [[3.0]]).data.tolist() == [[6.0]]

    def test_against_triple_loop(self):
        rng = np.random.default_rng(0)
        a = rng.normal(size=(4, 5)).astype(np.float32)
        b = rng.normal(size=(5, 3)).astype(np.float32)
        np.testing.assert_allclose(T.matmul(a, b).data, brute_matmul(a, b), atol=1e-6)

    def test_shape_error_names_both_shapes(self):
        with pytest.raises(ShapeError, match=r"\(2, 3\).*\(4, 5\)"):
            T.matmul(np.zeros((2, 3)), np.zeros((4, 5)))

    def test_shared_weight_batched_matches_loop(self):
        rng = np.random.default_rng(1)
        a = rng.normal(size=(3, 4, 5, 6))
        w = rng.normal(size=(4, 6, 2))
        out = T.matmul(f64(a), f64(w)).data
        for i in range(3):
            for h in range(4):
                np.testing.assert_allclose(out[i, h], a[i, h] @ w[h], atol=1e-12)

    def test_gradients(self):
        # dL/da = g b^T and dL/db = a^T g for L = sum(g * (a @ b))
        rng = np.random.default_rng(2)
        a, b, g = rng.normal(size=(3, 4)), rng.normal(size=(4, 2)), rng.normal(size=(3, 2))
        ta, tb = Tensor(a, True, np.float64), Tensor(b, True, np.float64)
        T.backward((T.matmul(ta, tb) * f64(g)).sum())
        np.testing.assert_allclose(ta.grad, g @ b.T, atol=1e-12)
        np.testing.assert_allclose(tb.grad, a.T @ g, atol=1e-12)


class TestSoftmax:
    def test_uniform(self):
        np.testing.assert_allclose(T.softmax_lastdim(np.zeros(4)).data, 0.25)

    def test_stabilized(self):
        p = T.softmax_lastdim([1000.0, 0.0]).data
        assert np.all(np.isfinite(p))
        assert p[0] == pytest.approx(1.0) and p[1] == pytest.approx(0.0, abs=1e-30)

    def test_formula_oracle(self):
        x = np.random.default_rng(3).normal(size=7).astype(np.float32)
        e = np.exp(x.astype(np.float64))
        np.testing.assert_allclose(T.softmax_lastdim(x).data, e / e.sum(), atol=1e-6)

    @settings(max_examples=60, deadline=None)
    @given(arrays(np.float32, st.tuples(st.integers(1, 4), st.integers(1, 9)),
                  elements=st.floats(-50, 50, width=32)))
    def test_rows_sum_to_one(self, x):
        np.testing.assert_allclose(T.softmax_lastdim(x).data.sum(-1), 1.0, atol=1e-6)


class TestRmsnorm:
    def test_constant_row(self):
        out = T.rmsnorm(np.full(8, 3.0), np.ones(8), eps=1e-12).data
        np.testing.assert_allclose(out, 1.0, rtol=1e-6)

    def test_zero_row(self):
        out = T.rmsnorm(np.zeros(8), np.ones(8), eps=1e-5).data
        assert np.all(out == 0.0)

    def test_formula_oracle(self):
        rng = np.random.default_rng(4)
        x = rng.normal(size=(3, 10)).astype(np.float32)
        g = rng.normal(size=10).astype(np.float32)
        x64 = x.astype(np.float64)
        ref = x64 / np.sqrt((x64**2).mean(-1, keepdims=True) + 1e-5) * g
        np.testing.assert_allclose(T.rmsnorm(x, g, 1e-5).data, ref, atol=1e-6)

    def test_eps_must_be_positive(self):
        with pytest.raises(ContractError):
            T.rmsnorm(np.ones(3), np.ones(3), eps=0.0)


class TestSmallOps:
    def test_silu_zero(self):
        assert T.silu([0.0]).data[0] == 0.0

    def test_embed_identity_table(self):
        np.testing.assert_array_equal(T.embed(np.eye(5), [3]).data, [[0, 0, 0, 1, 0]])

    def test_embed_out_of_range(self):
        with pytest.raises(IndexError):
            T.embed(np.eye(5), [5])

    def test_embed_backward_scatters(self):
        table = Tensor(np.zeros((4, 2)), requires_grad=True)
        T.backward(T.embed(table, [1, 1, 3]).sum())
        np.testing.assert_array_equal(table.grad, [[0, 0], [2, 2], [0, 0], [1, 1]])

    def test_add_backward_passes_grad_through(self):
        a = Tensor([1.0, 2.0], requires_grad=True)
        b = Tensor([3.0, 4.0], requires_grad=True)
        T.backward((a + b).sum())
        np.testing.assert_array_equal(a.grad, [1, 1])
        np.testing.assert_array_equal(b.grad, [1, 1])

    def test_scale(self):
        np.testing.assert_array_equal(T.scale([1.0, -2.0], 3.0).data, [3.0, -6.0])


class TestCrossEntropy:
    def test_uniform(self):
        assert T.cross_entropy(np.zeros((1, 10)), [4]).item() == pytest.approx(math.log(10), abs=1e-6)

    def test_confident(self):
        logits = np.zeros((1, 10))
        logits[0, 2] = 1000.0
        assert T.cross_entropy(logits, [2]).item() == pytest.approx(0.0, abs=1e-6)

    def test_oracle(self):
        rng = np.random.default_rng(5)
        logits = rng.normal(size=(6, 10)).astype(np.float32)
        t = rng.integers(0, 10, size=6)
        l64 = logits.astype(np.float64)
        ref = np.mean([-(l64[i, t[i]] - np.log(np.exp(l64[i]).sum())) for i in range(6)])
        assert T.cross_entropy(logits, t).item() == pytest.approx(ref, abs=1e-5)

    def test_bad_target(self):
        with pytest.raises(IndexError):
            T.cross_entropy(np.zeros((1, 10)), [10])


class TestBackward:
    def test_sum_of_squares(self):
        x = Tensor([1.0, -2.0, 3.0], requires_grad=True)
        T.backward((x * x).sum())
        np.testing.assert_allclose(x.grad, [2.0, -4.0, 6.0])

    def test_blend_gradient_is_difference(self):
        v, va = np.array([1.5, -2.0]), np.array([0.5, 4.0])
        w = Tensor([0.3], requires_grad=True)
        out = (w * v + (1.0 - w) * va).sum()
        T.backward(out)
        assert w.grad[0] == pytest.approx((v - va).sum())

    def test_non_scalar_loss(self):
        x = Tensor([1.0, 2.0], requires_grad=True)
        with pytest.raises(ContractError):
            T.backward(x * x)

    def test_repeated_backward_is_error(self):
        x = Tensor([1.0, 2.0], requires_grad=True)
        loss = (x * x).sum()
        T.backward(loss)
        with pytest.raises(ContractError):
            T.backward(loss)

    def test_no_grad_records_nothing(self):
        x = Tensor([1.0], requires_grad=True)
        with T.no_grad():
            y = x * x
        assert not y.requires_grad


def _quadratic(x):
    return (x * x).sum()


def _matmul_chain(x):
    rng = np.random.default_rng(7)
    w1, w2 = f64(rng.normal(size=(4, 5))), f64(rng.normal(size=(5, 3)))
    return (T.matmul(T.matmul(x, w1), w2) * f64(rng.normal(size=(3, 3)))).sum()


def _rms_silu_chain(x):
    g = f64(np.linspace(0.5, 1.5, 4))
    return (T.silu(T.rmsnorm(x, g, 1e-5)) * f64(np.arange(4.0))).sum()


class TestGradCheck:
    def test_quadratic(self):
        assert T.grad_check(_quadratic, np.random.default_rng(0).normal(size=5)) < 1e-6

    def test_matmul_chain(self):
        assert T.grad_check(_matmul_chain, np.random.default_rng(1).normal(size=(3, 4))) < 1e-4

    def test_rmsnorm_silu_chain(self):
        assert T.grad_check(_rms_silu_chain, np.random.default_rng(2).normal(size=(3, 4))) < 1e-3


def _weights(seed, shape):
    return f64(np.random.default_rng(1000 + seed).normal(size=shape))


OPS = {
    "matmul": lambda x, s: (T.matmul(x, _weights(s, (4, 3))) * _weights(s + 1, (3, 3))).sum(),
    "softmax": lambda x, s: (T.softmax_lastdim(x) * _weights(s, (3, 4))).sum(),
    "rmsnorm": lambda x, s: (T.rmsnorm(x, _weights(s, (4,)), 1e-5) * _weights(s + 1, (3, 4))).sum(),
    "silu": lambda x, s: (T.silu(x) * _weights(s, (3, 4))).sum(),
    "mul": lambda x, s: (x * _weights(s, (3, 4)) * x).sum(),
    "power": lambda x, s: T.power(x * x + 1.0, 0.5).sum(),
    "cross_entropy": lambda x, s: T.cross_entropy(x, [0, 2, 3]),
    "transpose_reshape": lambda x, s: (x.transpose(1, 0).reshape(2, 6) * _weights(s, (2, 6))).sum(),
    "index": lambda x, s: (x[np.array([0, 2, 2]), np.array([1, 3, 3])] * _weights(s, (3,))).sum(),
    "exp": lambda x, s: T.exp(x).sum(),
    "blend_positions": lambda x, s: (
        T.blend_positions(x, _weights(s, (2, 4)).data, f64([[0.3], [0.8]]), [0, 2]) * _weights(s + 1, (3, 4))
    ).sum(),
}


@pytest.mark.parametrize("seed", range(10))
@pytest.mark.parametrize("op", sorted(OPS))
def test_every_op_passes_grad_check(op, seed):
    x = np.random.default_rng(seed).normal(size=(3, 4))
    assert T.grad_check(lambda t: OPS[op](t, seed), x) < 1e-3


class TestBlendPositions:
    def test_untouched_positions_pass_through(self):
        x = np.arange(12.0).reshape(3, 4)
        out = T.blend_positions(x, np.zeros((1, 4)), 1.0, [1]).data
        np.testing.assert_array_equal(out[[0, 2]], x[[0, 2]])
        np.testing.assert_array_equal(out[1], 0.0)

    def test_formula(self):
        x, alt = np.ones((2, 3, 2)), np.full((2, 1, 2), 5.0)
        out = T.blend_positions(x, alt, 0.25, [2]).data
        np.testing.assert_allclose(out[:, 2], 0.75 * 1 + 0.25 * 5)

    @pytest.mark.parametrize("seed", range(5))
    def test_amount_gradient(self, seed):
        rng = np.random.default_rng(seed)
        x, alt = f64(rng.normal(size=(2, 3, 5, 4))), rng.normal(size=(2, 3, 2, 4))
        w = f64(rng.normal(size=(2, 3, 5, 4)))
        f = lambda a: (T.blend_positions(x, alt, a.reshape(1, 3, 1, 1), [1, 4]) * w).sum()  # noqa: E731
        assert T.grad_check(f, rng.uniform(0, 1, 3)) < 1e-6


def test_ops_are_deterministic():
    rng = np.random.default_rng(9)
    x = rng.normal(size=(2, 5, 8)).astype(np.float32)
    w = rng.normal(size=(8, 8)).astype(np.float32)
    g = np.ones(8, np.float32)
    run = lambda: T.softmax_lastdim(T.matmul(T.silu(T.rmsnorm(x, g)), w)).data  # noqa: E731
    assert run().tobytes() == run().tobytes()


def test_float32_default():
    assert Tensor([1.0]).data.dtype == np.float32
    assert Tensor(np.ones(2, np.float64)).data.dtype == np.float32
