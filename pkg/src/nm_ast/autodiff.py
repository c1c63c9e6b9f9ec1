"""Minimal reverse-mode autodiff over numpy arrays.

Each op returns a new :class:`Tensor`. If any input requires a gradient, the
output records its parents and a closure mapping the upstream gradient to one
gradient per parent. :meth:`Tensor.backward` walks that DAG once in reverse
topological order. Only leaves keep a ``.grad``; intermediate gradients live
in a dict scoped to a single backward call.

Broadcasting is deliberately limited to tensor-vs-python-scalar and
equal-shape operands. The ops that need a bias or affine broadcast
(``linear``, ``layernorm``) do it internally with explicit backward rules.

Training runs in float32. ``verification_mode()`` switches new tensors to
float64 and makes every op check its output for NaN/Inf.
"""

from __future__ import annotations

import contextlib
import functools
import math
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import DimensionError, DomainError, NonFiniteError

_state = {"dtype": np.float32, "strict": False, "grad": True}


def default_dtype():
    return _state["dtype"]


def is_strict() -> bool:
    return _state["strict"]


@contextlib.contextmanager
def precision(dtype):
    prev = _state["dtype"]
    _state["dtype"] = np.dtype(dtype).type
    try:
        yield
    finally:
        _state["dtype"] = prev


@contextlib.contextmanager
def verification_mode():
    """float64 tensors plus finiteness/domain checks on every op."""
    prev = dict(_state)
    _state["dtype"] = np.float64
    _state["strict"] = True
    try:
        yield
    finally:
        _state.update(prev)


@contextlib.contextmanager
def no_grad():
    prev = _state["grad"]
    _state["grad"] = False
    try:
        yield
    finally:
        _state["grad"] = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_prev", "_backward", "op")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        self.data = np.asarray(data, dtype=dtype or _state["dtype"])
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._prev: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self.op = "leaf"

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data, dtype=self.data.dtype)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self, grad: np.ndarray | None = None) -> None:
        if grad is None:
            if self.data.size != 1:
                raise DimensionError("backward() without a seed gradient needs a scalar output")
            grad = np.ones_like(self.data)
        order = _topo_order(self)
        grads: dict[int, np.ndarray] = {id(self): np.asarray(grad, dtype=self.data.dtype)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                if node.requires_grad:
                    node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._prev, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                grads[key] = pg if key not in grads else grads[key] + pg

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return add(neg(self), other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return neg(self)

    def __getitem__(self, idx):
        return getitem(self, idx)


def _topo_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._prev:
            if id(p) not in seen:
                stack.append((p, False))
    return order


def _make(data: np.ndarray, parents: Sequence[Tensor], backward: Callable, op: str) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.op = op
    if _state["strict"] and not np.all(np.isfinite(data)):
        raise NonFiniteError(f"{op} produced non-finite values")
    if _state["grad"] and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._prev = tuple(parents)
        out._backward = backward
    else:
        out.requires_grad = False
        out._prev = ()
        out._backward = None
    return out


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _is_scalar(x) -> bool:
    return isinstance(x, (int, float, np.floating, np.integer))


def _check_same(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} differ (only equal-shape or scalar operands)")


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    a = as_tensor(a)
    if _is_scalar(b):
        return _make(a.data + a.data.dtype.type(b), (a,), lambda g: (g,), "add")
    b = as_tensor(b)
    _check_same(a, b, "add")
    return _make(a.data + b.data, (a, b), lambda g: (g, g), "add")


def sub(a, b) -> Tensor:
    a = as_tensor(a)
    if _is_scalar(b):
        return _make(a.data - a.data.dtype.type(b), (a,), lambda g: (g,), "sub")
    b = as_tensor(b)
    _check_same(a, b, "sub")
    return _make(a.data - b.data, (a, b), lambda g: (g, -g), "sub")


def neg(a: Tensor) -> Tensor:
    return _make(-a.data, (a,), lambda g: (-g,), "neg")


def scale(a: Tensor, c: float) -> Tensor:
    c = a.data.dtype.type(c)
    return _make(a.data * c, (a,), lambda g: (g * c,), "scale")


def mul(a, b) -> Tensor:
    a = as_tensor(a)
    if _is_scalar(b):
        return scale(a, b)
    b = as_tensor(b)
    _check_same(a, b, "mul")
    ad, bd = a.data, b.data
    return _make(ad * bd, (a, b), lambda g: (g * bd, g * ad), "mul")


def exp(a: Tensor) -> Tensor:
    e = np.exp(a.data)
    return _make(e, (a,), lambda g: (g * e,), "exp")


def log(a: Tensor) -> Tensor:
    x = a.data
    if _state["strict"] and np.any(x <= 0):
        raise DomainError("log of non-positive value")
    return _make(np.log(x), (a,), lambda g: (g / x,), "log")


def square(a: Tensor) -> Tensor:
    x = a.data
    return _make(x * x, (a,), lambda g: (2 * x * g,), "square")


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(a: Tensor) -> Tensor:
    """tanh approximation, as in GPT-2."""
    x = a.data
    c = x.dtype.type(_GELU_C)
    k = x.dtype.type(0.044715)
    t = x * x
    t *= k
    t += 1
    t *= x
    t *= c
    np.tanh(t, out=t)
    out = t + 1
    out *= x
    out *= 0.5

    def backward(g):
        # d/dx = 0.5 (1 + t) + 0.5 x (1 - t^2) c (1 + 3k x^2)
        d = x * x
        d *= 3 * k
        d += 1
        d *= c
        sech2 = t * t
        np.subtract(1, sech2, out=sech2)
        d *= sech2
        d *= x
        d += 1
        d += t
        d *= 0.5
        d *= g
        return (d,)

    return _make(out, (a,), backward, "gelu")


# ---------------------------------------------------------------- reductions / shape


def sum(a: Tensor, axis=None) -> Tensor:  # noqa: A001 - mirrors numpy
    x = a.data
    out = np.sum(x, axis=axis)

    def backward(g):
        if axis is None:
            return (np.full_like(x, g),)
        return (np.broadcast_to(np.expand_dims(g, axis), x.shape).copy(),)

    return _make(np.asarray(out, dtype=x.dtype), (a,), backward, "sum")


def mean(a: Tensor) -> Tensor:
    return scale(sum(a), 1.0 / a.size)


def reshape(a: Tensor, shape) -> Tensor:
    old = a.shape
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),), "reshape")


def transpose(a: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(range(a.ndim))[:-2] + (a.ndim - 1, a.ndim - 2)
    inv = np.argsort(axes)
    return _make(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inv),), "transpose")


def getitem(a: Tensor, idx) -> Tensor:
    x = a.data

    def backward(g):
        full = np.zeros_like(x)
        full[idx] = g
        return (full,)

    return _make(np.ascontiguousarray(x[idx]), (a,), backward, "getitem")


# ---------------------------------------------------------------- linear algebra


def matmul(a: Tensor, b_t: Tensor) -> Tensor:
    """``a @ b_t^T`` with ``a: [..., N, C]`` and ``b_t: [D, C]`` or ``[..., D, C]``."""
    if a.ndim < 2 or b_t.ndim < 2 or a.shape[-1] != b_t.shape[-1]:
        raise DimensionError(f"matmul: inner extents of {a.shape} and {b_t.shape} differ")
    if b_t.ndim > 2 and b_t.shape[:-2] != a.shape[:-2]:
        raise DimensionError(f"matmul: batch extents of {a.shape} and {b_t.shape} differ")
    ad, bd = a.data, b_t.data
    out = ad @ np.swapaxes(bd, -1, -2)

    def backward(g):
        ga = g @ bd
        if bd.ndim == 2:
            gb = g.reshape(-1, g.shape[-1]).T @ ad.reshape(-1, ad.shape[-1])
        else:
            gb = np.swapaxes(g, -1, -2) @ ad
        return ga, gb

    return _make(out, (a, b_t), backward, "matmul")


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """``x @ w^T + b`` for ``x: [..., C]``, ``w: [D, C]``, ``b: [D]``."""
    if w.ndim != 2 or x.shape[-1] != w.shape[1]:
        raise DimensionError(f"linear: input {x.shape} does not match weight {w.shape}")
    if b is not None and b.shape != (w.shape[0],):
        raise DimensionError(f"linear: bias {b.shape} does not match weight {w.shape}")
    xd, wd = x.data, w.data
    x2 = xd.reshape(-1, xd.shape[-1])
    out = x2 @ wd.T
    if b is not None:
        out += b.data
    out = out.reshape(xd.shape[:-1] + (wd.shape[0],))

    def backward(g):
        g2 = g.reshape(-1, g.shape[-1])
        gx = (g2 @ wd).reshape(xd.shape)
        gw = g2.T @ x2
        if b is None:
            return gx, gw
        return gx, gw, g2.sum(axis=0)

    parents = (x, w) if b is None else (x, w, b)
    return _make(out, parents, backward, "linear")


def ste_mask(w: Tensor, mask: np.ndarray) -> Tensor:
    """Masked weight ``mask * w`` whose backward passes the gradient to every entry of ``w``."""
    if mask.shape != w.shape:
        raise DimensionError(f"ste_mask: mask {mask.shape} vs weight {w.shape}")
    return _make(w.data * mask.astype(w.data.dtype, copy=False), (w,), lambda g: (g,), "ste_mask")


def embedding(weight: Tensor, ids: np.ndarray) -> Tensor:
    ids = np.asarray(ids)
    if ids.size and (ids.min() < 0 or ids.max() >= weight.shape[0]):
        raise IndexError(f"embedding id out of range [0, {weight.shape[0]})")
    wd = weight.data

    def backward(g):
        full = np.zeros_like(wd)
        np.add.at(full, ids.reshape(-1), g.reshape(-1, wd.shape[1]))
        return (full,)

    return _make(wd[ids], (weight,), backward, "embedding")


def add_rows(x: Tensor, table: Tensor) -> Tensor:
    """``x[b, s, :] + table[s, :]`` for ``x: [B, S, D]`` and ``table: [L >= S, D]``."""
    b, s_len, d = x.shape
    if table.ndim != 2 or table.shape[1] != d or table.shape[0] < s_len:
        raise DimensionError(f"add_rows: table {table.shape} cannot cover {x.shape}")
    rows = table.data[:s_len]
    full = table.shape

    def backward(g):
        gt = np.zeros(full, dtype=g.dtype)
        gt[:s_len] = g.sum(axis=0)
        return g, gt

    return _make(x.data + rows, (x, table), backward, "add_rows")


# ---------------------------------------------------------------- normalisation / probabilities


def _softmax_np(x: np.ndarray, axis: int) -> np.ndarray:
    z = x - np.max(x, axis=axis, keepdims=True)
    e = np.exp(z)
    return e / np.sum(e, axis=axis, keepdims=True)


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    s = _softmax_np(a.data, axis)

    def backward(g):
        return (s * (g - np.sum(g * s, axis=axis, keepdims=True)),)

    return _make(s, (a,), backward, "softmax")


def log_softmax(a: Tensor, axis: int = -1) -> Tensor:
    x = a.data
    z = x - np.max(x, axis=axis, keepdims=True)
    lse = np.log(np.sum(np.exp(z), axis=axis, keepdims=True))
    out = z - lse

    def backward(g):
        return (g - np.exp(out) * np.sum(g, axis=axis, keepdims=True),)

    return _make(out, (a,), backward, "log_softmax")


@functools.lru_cache(maxsize=8)
def _future_mask(s_len: int) -> np.ndarray:
    return np.triu(np.ones((s_len, s_len), dtype=bool), k=1)


def causal_softmax(a: Tensor) -> Tensor:
    """Softmax over the last axis of ``[..., S, S]`` scores with future keys masked out."""
    s_len = a.shape[-1]
    if a.shape[-2] != s_len:
        raise DimensionError("causal_softmax expects square trailing axes")
    s = np.where(_future_mask(s_len), -np.inf, a.data)
    # in place: shift by the row max, exponentiate, normalise
    s -= s.max(axis=-1, keepdims=True)
    np.exp(s, out=s)
    s /= s.sum(axis=-1, keepdims=True)

    def backward(g):
        return (s * (g - np.sum(g * s, axis=-1, keepdims=True)),)

    return _make(s, (a,), backward, "causal_softmax")


def layernorm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise DimensionError(f"layernorm: gain/bias must have shape ({d},)")
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + xd.dtype.type(eps))
    xhat = xc * inv
    out = xhat * gain.data + bias.data

    def backward(g):
        gx_hat = g * gain.data
        gx = inv * (
            gx_hat
            - gx_hat.mean(axis=-1, keepdims=True)
            - xhat * (gx_hat * xhat).mean(axis=-1, keepdims=True)
        )
        lead = tuple(range(g.ndim - 1))
        return gx, np.sum(g * xhat, axis=lead), np.sum(g, axis=lead)

    return _make(out, (x, gain, bias), backward, "layernorm")


def cross_entropy(logits: Tensor, targets: np.ndarray) -> Tensor:
    """Mean over all leading positions of ``-log softmax(logits)[target]``."""
    targets = np.asarray(targets)
    v = logits.shape[-1]
    if targets.shape != logits.shape[:-1]:
        raise DimensionError(f"cross_entropy: targets {targets.shape} vs logits {logits.shape}")
    if targets.size and (targets.min() < 0 or targets.max() >= v):
        raise IndexError(f"target id out of range [0, {v})")
    x = logits.data.reshape(-1, v)
    t = targets.reshape(-1)
    z = x - x.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1))
    rows = np.arange(t.size)
    count = t.size
    loss = np.asarray((lse - z[rows, t]).sum() / count, dtype=x.dtype)

    def backward(g):
        p = np.exp(z - lse[:, None])
        p[rows, t] -= 1
        return ((p * (g / count)).reshape(logits.shape),)

    return _make(loss, (logits,), backward, "cross_entropy")


def kl_div_probs(p: np.ndarray, q: Tensor) -> Tensor:
    """Sum over all entries of ``p * log(p / q)`` for a constant distribution ``p``.

    Entries with ``p == 0`` contribute zero and no gradient, which keeps causally
    masked attention rows well defined.
    """
    p = np.asarray(p, dtype=q.data.dtype)
    if p.shape != q.shape:
        raise DimensionError(f"kl_div_probs: {p.shape} vs {q.shape}")
    support = p > 0
    qd = q.data
    safe_q = np.where(support, qd, 1)
    safe_p = np.where(support, p, 1)
    val = np.sum(np.where(support, p * (np.log(safe_p) - np.log(safe_q)), 0))

    def backward(g):
        return (np.where(support, -g * p / safe_q, 0),)

    return _make(np.asarray(val, dtype=qd.dtype), (q,), backward, "kl_div_probs")


# ---------------------------------------------------------------- verification


def grad_check(
    f: Callable[[], Tensor],
    params: Iterable[Tensor],
    h: float = 1e-5,
    max_coords: int | None = None,
    seed: int = 0,
    floor: float = 1e-6,
) -> float:
    """Max relative error between tape gradients and central differences.

    Per coordinate the error is ``|g - fd| / max(|g|, |fd|, floor)``. ``floor``
    keeps coordinates whose true gradient is ~0 from dominating through
    rounding noise. With ``max_coords`` each parameter is checked on a random
    subset of coordinates.
    """
    params = list(params)
    for p in params:
        if p.data.dtype != np.float64:
            raise TypeError("grad_check requires float64 parameters")
        p.grad = None
    f().backward()
    analytic = [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]
    rng = np.random.default_rng(seed)
    worst = 0.0
    with no_grad():
        for p, ga in zip(params, analytic):
            flat = p.data.reshape(-1)
            if not np.shares_memory(flat, p.data):
                raise ValueError("grad_check needs contiguous parameter arrays")
            coords = np.arange(flat.size)
            if max_coords is not None and flat.size > max_coords:
                coords = np.sort(rng.choice(flat.size, size=max_coords, replace=False))
            gflat = ga.reshape(-1)
            for i in coords:
                orig = flat[i]
                flat[i] = orig + h
                fp = float(f().data)
                flat[i] = orig - h
                fm = float(f().data)
                flat[i] = orig
                fd = (fp - fm) / (2 * h)
                denom = max(abs(gflat[i]), abs(fd), floor)
                worst = max(worst, abs(gflat[i] - fd) / denom)
    for p in params:
        p.grad = None
    return worst
