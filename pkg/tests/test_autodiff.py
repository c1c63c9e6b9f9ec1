import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from nm_ast import autodiff as ad
from nm_ast.errors import DimensionError, DomainError, NonFiniteError

TOL = 1e-6


def param(shape, seed=0, scale=1.0, positive=False):
    r = np.random.default_rng(seed).normal(0, scale, size=shape)
    if positive:
        r = np.abs(r) + 0.5
    return ad.Tensor(r, requires_grad=True, dtype=np.float64)


def weighted(out: ad.Tensor, seed=99) -> ad.Tensor:
    """Contract an output against fixed random weights so every entry matters."""
    w = np.random.default_rng(seed).normal(size=out.shape)
    return ad.sum(ad.mul(out, ad.Tensor(w, dtype=np.float64)))


# ---------------------------------------------------------------- forward values


def test_matmul_values():
    with ad.verification_mode():
        a = ad.Tensor([[1.0, 2.0]])
        b = ad.Tensor([[3.0, 4.0]])
        assert ad.matmul(a, b).data.tolist() == [[11.0]]
        eye = ad.Tensor(np.eye(2))
        np.testing.assert_array_equal(ad.matmul(eye, eye).data, np.eye(2))


def test_matmul_shape_error():
    with pytest.raises(DimensionError):
        ad.matmul(ad.Tensor(np.ones((2, 3))), ad.Tensor(np.ones((2, 4))))


def test_elementwise_values():
    with ad.verification_mode():
        assert ad.add(ad.Tensor([1.0, 2.0]), ad.Tensor([3.0, 4.0])).data.tolist() == [4.0, 6.0]
        assert ad.scale(ad.Tensor([2.0, 4.0]), 0.5).data.tolist() == [1.0, 2.0]
        assert ad.sub(ad.Tensor([1.0]), ad.Tensor([3.0])).data.tolist() == [-2.0]


def test_no_general_broadcasting():
    with pytest.raises(DimensionError):
        ad.add(ad.Tensor(np.ones((2, 3))), ad.Tensor(np.ones(3)))
    with pytest.raises(DimensionError):
        ad.mul(ad.Tensor(np.ones((2, 3))), ad.Tensor(np.ones((3, 2))))


def test_log_domain_error_in_strict_mode():
    with ad.verification_mode():
        with pytest.raises(DomainError):
            ad.log(ad.Tensor([1.0, 0.0]))
    # outside strict mode numpy semantics apply
    with np.errstate(divide="ignore"):
        assert ad.log(ad.Tensor([0.0])).data[0] == -np.inf


def test_strict_mode_rejects_non_finite():
    with ad.verification_mode():
        with pytest.raises(NonFiniteError), np.errstate(over="ignore"):
            ad.exp(ad.Tensor([1e6]))


def test_softmax_values():
    with ad.verification_mode():
        np.testing.assert_allclose(ad.softmax(ad.Tensor([0.0, 0.0])).data, [0.5, 0.5])
        s = ad.softmax(ad.Tensor([1000.0, 0.0])).data
        assert np.all(np.isfinite(s))
        assert s[0] == pytest.approx(1.0) and s[1] == pytest.approx(0.0, abs=1e-300)


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 5), st.integers(1, 9), st.integers(0, 10_000))
def test_softmax_rows_sum_to_one(rows, cols, seed):
    x = np.random.default_rng(seed).normal(0, 10, size=(rows, cols))
    s = ad.softmax(ad.Tensor(x, dtype=np.float64)).data
    np.testing.assert_allclose(s.sum(axis=-1), 1.0, atol=1e-6)


def test_layernorm_values():
    with ad.verification_mode():
        g, b = ad.Tensor(np.ones(2)), ad.Tensor(np.zeros(2))
        out = ad.layernorm(ad.Tensor([[1.0, 3.0]]), g, b, eps=1e-12).data
        np.testing.assert_allclose(out, [[-1.0, 1.0]], atol=1e-9)
        const = ad.layernorm(ad.Tensor([[5.0, 5.0]]), g, b).data
        np.testing.assert_array_equal(const, [[0.0, 0.0]])
        x = np.random.default_rng(1).normal(3, 2, size=(4, 7))
        y = ad.layernorm(ad.Tensor(x), ad.Tensor(np.ones(7)), ad.Tensor(np.zeros(7)), eps=1e-12).data
        np.testing.assert_allclose(y.mean(-1), 0, atol=1e-5)
        np.testing.assert_allclose(y.var(-1), 1, atol=1e-5)


def test_cross_entropy_values():
    with ad.verification_mode():
        uniform = ad.Tensor(np.zeros((2, 3, 4)))
        assert ad.cross_entropy(uniform, np.zeros((2, 3), int)).data == pytest.approx(math.log(4))
        peaked = np.full((1, 1, 4), -50.0)
        peaked[0, 0, 2] = 50.0
        assert ad.cross_entropy(ad.Tensor(peaked), np.array([[2]])).data == pytest.approx(0, abs=1e-12)
        rng = np.random.default_rng(3)
        x = rng.normal(size=(2, 5, 6))
        t = rng.integers(0, 6, size=(2, 5))
        direct = 0.0
        for i in range(2):
            for j in range(5):
                row = x[i, j]
                direct += -(row[t[i, j]] - math.log(sum(math.exp(v) for v in row)))
        assert ad.cross_entropy(ad.Tensor(x), t).data == pytest.approx(direct / 10, abs=1e-6)


def test_cross_entropy_index_error():
    with pytest.raises(IndexError):
        ad.cross_entropy(ad.Tensor(np.zeros((1, 2, 4))), np.array([[0, 4]]))


# ---------------------------------------------------------------- gradients


def _check(f, params, tol=TOL):
    err = ad.grad_check(f, params)
    assert err <= tol, err


OPS = {
    "add": lambda a, b: ad.add(a, b),
    "sub": lambda a, b: ad.sub(a, b),
    "mul": lambda a, b: ad.mul(a, b),
    "scale": lambda a, b: ad.scale(a, -1.7),
    "exp": lambda a, b: ad.exp(a),
    "log": lambda a, b: ad.log(ad.add(ad.square(a), 0.5)),
    "square": lambda a, b: ad.square(a),
    "neg": lambda a, b: ad.neg(a),
    "gelu": lambda a, b: ad.gelu(a),
    "sum_axis": lambda a, b: ad.sum(a, axis=1),
    "mean": lambda a, b: ad.mean(a),
    "reshape": lambda a, b: ad.reshape(a, (4, 3)),
    "transpose": lambda a, b: ad.transpose(a),
    "getitem": lambda a, b: a[1:, ::2],
    "softmax": lambda a, b: ad.softmax(a),
    "log_softmax": lambda a, b: ad.log_softmax(a),
}


@pytest.mark.parametrize("name", sorted(OPS))
def test_op_gradients(name):
    with ad.verification_mode():
        a, b = param((3, 4), 1), param((3, 4), 2)
        _check(lambda: weighted(OPS[name](a, b)), [a, b])


def test_matmul_gradient():
    with ad.verification_mode():
        a, b = param((3, 4), 1), param((5, 4), 2)
        _check(lambda: weighted(ad.matmul(a, b)), [a, b])
        a3, b3 = param((2, 3, 4), 3), param((2, 5, 4), 4)
        _check(lambda: weighted(ad.matmul(a3, b3)), [a3, b3])


def test_linear_gradient():
    with ad.verification_mode():
        x, w, b = param((2, 3, 4), 1), param((5, 4), 2), param((5,), 3)
        _check(lambda: weighted(ad.linear(x, w, b)), [x, w, b])


def test_ste_mask_gradient_passes_straight_through():
    with ad.verification_mode():
        w = param((4, 4), 1)
        mask = (np.arange(16).reshape(4, 4) % 4 < 2).astype(np.float64)
        out = ad.ste_mask(w, mask)
        np.testing.assert_array_equal(out.data, w.data * mask)
        g = np.random.default_rng(5).normal(size=(4, 4))
        out.backward(g)
        # the pruned entries receive the upstream gradient unmodified
        np.testing.assert_array_equal(w.grad, g)


def test_layernorm_gradient():
    with ad.verification_mode():
        x, g, b = param((2, 3, 6), 1, scale=2.0), param((6,), 2), param((6,), 3)
        _check(lambda: weighted(ad.layernorm(x, g, b)), [x, g, b])


def test_causal_softmax_gradient_and_causality():
    with ad.verification_mode():
        x = param((2, 5, 5), 1)
        s = ad.causal_softmax(x).data
        assert np.all(np.triu(s[0], 1) == 0)
        np.testing.assert_allclose(s.sum(-1), 1, atol=1e-12)
        _check(lambda: weighted(ad.causal_softmax(x)), [x])


def test_embedding_and_add_rows_gradients():
    with ad.verification_mode():
        table, pos = param((7, 3), 1), param((6, 3), 2)
        ids = np.array([[0, 3, 3, 6], [1, 1, 2, 0]])
        _check(lambda: weighted(ad.add_rows(ad.embedding(table, ids), pos)), [table, pos])


def test_cross_entropy_gradient():
    with ad.verification_mode():
        x = param((2, 3, 5), 1)
        t = np.random.default_rng(0).integers(0, 5, size=(2, 3))
        _check(lambda: ad.cross_entropy(x, t), [x])


def test_kl_div_probs_gradient():
    with ad.verification_mode():
        p = np.random.default_rng(0).dirichlet(np.ones(4), size=3)
        p[0, 1] = 0
        p[0] /= p[0].sum()
        q_logits = param((3, 4), 1)
        _check(lambda: ad.kl_div_probs(p, ad.softmax(q_logits)), [q_logits])


# ---------------------------------------------------------------- grad_check and tape semantics


def test_grad_check_affine_and_constant():
    with ad.verification_mode():
        x = param((3,), 0)
        c = ad.Tensor([1.0, -2.0, 0.5], dtype=np.float64)
        assert ad.grad_check(lambda: ad.sum(ad.mul(x, c)), [x]) < 1e-9
        # constant function: tape gradient exactly zero
        const = lambda: ad.sum(ad.Tensor(np.ones(3)))  # noqa: E731
        out = ad.add(ad.sum(ad.scale(x, 0.0)), const())
        out.backward()
        np.testing.assert_array_equal(x.grad, 0)


def test_grad_check_requires_float64():
    x = ad.Tensor(np.ones(3, np.float32), requires_grad=True)
    with pytest.raises(TypeError):
        ad.grad_check(lambda: ad.sum(x), [x])


def test_grad_check_detects_wrong_gradient():
    with ad.verification_mode():
        x = param((4,), 0)

        def broken():
            y = ad.square(x)
            y._backward = lambda g: (g * x.data,)  # half the true derivative
            return ad.sum(y)

        assert ad.grad_check(broken, [x]) > 0.4


def test_backward_twice_doubles_gradients():
    with ad.verification_mode():
        x = param((3, 3), 0)
        y = weighted(ad.gelu(ad.matmul(x, x)))
        y.backward()
        g1 = x.grad.copy()
        y.backward()
        np.testing.assert_array_equal(x.grad, 2 * g1)


def test_shared_subexpression_accumulates():
    with ad.verification_mode():
        x = param((2,), 0)
        y = ad.mul(x, x)
        z = ad.sum(ad.add(y, y))
        z.backward()
        np.testing.assert_allclose(x.grad, 4 * x.data)


def test_no_grad_builds_no_tape():
    x = param((2,), 0)
    with ad.no_grad():
        y = ad.square(x)
    assert not y.requires_grad and y._prev == ()


def test_default_precision_is_float32_and_switchable():
    assert ad.Tensor([1.0]).data.dtype == np.float32
    with ad.precision(np.float64):
        assert ad.Tensor([1.0]).data.dtype == np.float64
    assert ad.Tensor([1.0]).data.dtype == np.float32
