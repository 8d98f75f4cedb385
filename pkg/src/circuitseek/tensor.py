"""Dense float32 tensors with tape-based reverse-mode differentiation.

Only what the transformer and the mask optimizer need is provided. Every op
returns a new :class:`Tensor`; when any input requires grad the result records
its parents and a backward closure. :func:`backward` replays the reachable part
of that record in reverse execution order and then frees it.
"""

from __future__ import annotations

import contextlib
import itertools
import threading
from typing import Callable, Sequence

import numpy as np

DTYPE = np.float32

_seq = itertools.count()
_state = threading.local()


class ShapeError(ValueError):
    """Operand shapes are incompatible."""


class ContractError(RuntimeError):
    """An operation was called outside its documented preconditions."""


def grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextlib.contextmanager
def no_grad():
    prev = grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "_seq", "_consumed")
    __array_ufunc__ = None  # make ndarray <op> Tensor dispatch to Tensor's reflected ops

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        self.data = np.asarray(data).astype(dtype or DTYPE, copy=False)
        self.requires_grad = requires_grad
        self.grad = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None
        self._seq = next(_seq)
        self._consumed = False

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return self._backward is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> Tensor:
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return index(self, idx)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes or None)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: tuple[Tensor, ...], backward_fn) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out._seq = next(_seq)
    out._consumed = False
    if grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward_fn
    else:
        out.requires_grad = False
        out._parents = ()
        out._backward = None
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and grad.shape[i] != 1:
            grad = grad.sum(axis=i, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# elementwise


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    try:
        data = a.data + b.data
    except ValueError as e:
        raise ShapeError(f"add: cannot combine shapes {a.shape} and {b.shape}") from e
    return _make(data, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    try:
        data = a.data - b.data
    except ValueError as e:
        raise ShapeError(f"sub: cannot combine shapes {a.shape} and {b.shape}") from e
    return _make(data, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    try:
        data = a.data * b.data
    except ValueError as e:
        raise ShapeError(f"mul: cannot combine shapes {a.shape} and {b.shape}") from e
    return _make(
        data,
        (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
    )


def scale(a, s: float) -> Tensor:
    a = as_tensor(a)
    return _make(a.data * a.data.dtype.type(s), (a,), lambda g: (g * g.dtype.type(s),))


def power(a, p: float) -> Tensor:
    """Elementwise ``a ** p``; callers keep ``a`` positive for fractional ``p``."""
    a = as_tensor(a)
    data = a.data ** a.data.dtype.type(p)
    return _make(data, (a,), lambda g: (g * p * a.data ** a.data.dtype.type(p - 1),))


def exp(a) -> Tensor:
    a = as_tensor(a)
    data = np.exp(a.data)
    return _make(data, (a,), lambda g: (g * data,))


def silu(x) -> Tensor:
    x = as_tensor(x)
    sig = 1.0 / (1.0 + np.exp(-x.data))
    sig = sig.astype(x.data.dtype, copy=False)
    data = x.data * sig
    return _make(data, (x,), lambda g: (g * (sig * (1.0 + x.data * (1.0 - sig))),))


# ---------------------------------------------------------------------------
# shape


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    try:
        data = a.data.reshape(shape)
    except ValueError as e:
        raise ShapeError(f"reshape: {a.shape} -> {tuple(shape)}") from e
    return _make(data, (a,), lambda g: (g.reshape(a.shape),))


def transpose(a, axes=None) -> Tensor:
    a = as_tensor(a)
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _make(a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),))


def index(a, idx) -> Tensor:
    a = as_tensor(a)
    data = a.data[idx]

    def bw(g):
        out = np.zeros_like(a.data)
        np.add.at(out, idx, g)
        return (out,)

    return _make(np.array(data, copy=True), (a,), bw)


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    ts = tuple(as_tensor(t) for t in tensors)
    data = np.stack([t.data for t in ts], axis=axis)
    return _make(data, ts, lambda g: tuple(np.take(g, i, axis=axis) for i in range(len(ts))))


def blend_positions(x, alt: np.ndarray, amount, positions: Sequence[int]) -> Tensor:
    """``x`` with ``x*(1-amount) + alt*amount`` written at ``positions`` of axis -2.

    ``alt`` holds only the selected positions; ``amount`` broadcasts against it.
    Other positions pass through untouched (and skip the elementwise work).
    """
    x, amount = as_tensor(x), as_tensor(amount)
    pos = list(positions)
    cur = x.data[..., pos, :]
    diff = alt.astype(x.data.dtype, copy=False) - cur
    data = x.data.copy()
    data[..., pos, :] = cur + diff * amount.data

    def bw(g):
        gx = g.copy()
        gp = g[..., pos, :]
        gx[..., pos, :] = gp * (1.0 - amount.data)
        return gx, _unbroadcast(gp * diff, amount.shape)

    return _make(data, (x, amount), bw)


def sum_(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    data = np.asarray(a.data.sum(axis=axis, keepdims=keepdims))

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _make(data, (a,), bw)


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    n = a.size if axis is None else int(np.prod([a.shape[i] for i in np.atleast_1d(axis)]))
    return scale(sum_(a, axis, keepdims), 1.0 / n)


# ---------------------------------------------------------------------------
# linear algebra and model ops


def _fold(x: np.ndarray, lead: int) -> np.ndarray:
    """``L + B + (m, k)`` -> ``B + (L*m, k)`` where ``L`` are the first ``lead`` axes."""
    perm = [*range(lead, x.ndim - 2), *range(lead), x.ndim - 2, x.ndim - 1]
    rest = x.shape[lead:]
    return x.transpose(perm).reshape(*rest[:-2], -1, rest[-1])


def _unfold(y: np.ndarray, lead_shape: tuple[int, ...], m: int) -> np.ndarray:
    lead = len(lead_shape)
    batch = y.shape[:-2]
    y = y.reshape(*batch, *lead_shape, m, y.shape[-1])
    nb = len(batch)
    perm = [*range(nb, nb + lead), *range(nb), nb + lead, nb + lead + 1]
    return y.transpose(perm)


def matmul(a, b) -> Tensor:
    """Matrix product; leading batch dimensions follow numpy broadcasting."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner dimensions disagree for {a.shape} @ {b.shape}")
    lead = a.ndim - b.ndim
    if lead > 0 and a.shape[lead:-2] == b.shape[:-2]:
        # b is shared across a's extra leading axes: one GEMM per b-batch
        lead_shape, m = a.shape[:lead], a.shape[-2]
        af = _fold(a.data, lead)
        data = np.ascontiguousarray(_unfold(np.matmul(af, b.data), lead_shape, m))

        def bw(g):
            gf = _fold(g, lead)
            ga = _unfold(np.matmul(gf, np.swapaxes(b.data, -1, -2)), lead_shape, m) if a.requires_grad else None
            gb = np.matmul(np.swapaxes(af, -1, -2), gf) if b.requires_grad else None
            return ga, gb

        return _make(data, (a, b), bw)
    try:
        data = np.matmul(a.data, b.data)
    except ValueError as e:
        raise ShapeError(f"matmul: batch dimensions disagree for {a.shape} @ {b.shape}") from e

    def bw(g):
        ga = _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape) if a.requires_grad else None
        gb = _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape) if b.requires_grad else None
        return ga, gb

    return _make(data, (a, b), bw)


def softmax_lastdim(x) -> Tensor:
    x = as_tensor(x)
    if x.ndim == 0 or x.shape[-1] < 1:
        raise ShapeError(f"softmax: last dimension must be >= 1, got shape {x.shape}")
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=-1, keepdims=True)

    def bw(g):
        return (p * (g - (g * p).sum(axis=-1, keepdims=True)),)

    return _make(p, (x,), bw)


def rmsnorm(x, gain, eps: float = 1e-5) -> Tensor:
    """``x / sqrt(mean(x**2) + eps) * gain`` over the last dimension."""
    x, gain = as_tensor(x), as_tensor(gain)
    if eps <= 0:
        raise ContractError("rmsnorm: eps must be positive")
    if gain.shape != x.shape[-1:]:
        raise ShapeError(f"rmsnorm: gain {gain.shape} does not match features of {x.shape}")
    d = x.shape[-1]
    inv = 1.0 / np.sqrt((x.data * x.data).mean(axis=-1, keepdims=True) + x.data.dtype.type(eps))
    inv = inv.astype(x.data.dtype, copy=False)
    xhat = x.data * inv
    data = xhat * gain.data

    def bw(g):
        gx = gy = None
        if x.requires_grad:
            gh = g * gain.data
            gx = inv * (gh - xhat * (gh * xhat).sum(axis=-1, keepdims=True) / d)
        if gain.requires_grad:
            gy = (g * xhat).reshape(-1, d).sum(axis=0)
        return gx, gy

    return _make(data, (x, gain), bw)


def embed(table, ids) -> Tensor:
    """Gather rows of ``table`` for integer ``ids`` (any shape)."""
    table = as_tensor(table)
    ids = np.asarray(ids, dtype=np.int64)
    V = table.shape[0]
    if ids.size and (ids.min() < 0 or ids.max() >= V):
        raise IndexError(f"embed: token id out of range [0, {V})")
    data = table.data[ids]

    def bw(g):
        out = np.zeros_like(table.data)
        np.add.at(out, ids.reshape(-1), g.reshape(-1, table.shape[1]))
        return (out,)

    return _make(data, (table,), bw)


def cross_entropy(logits, target) -> Tensor:
    """Mean of ``-log softmax(logits)[target]`` over leading dimensions."""
    logits = as_tensor(logits)
    target = np.asarray(target, dtype=np.int64)
    V = logits.shape[-1]
    if target.shape != logits.shape[:-1]:
        raise ShapeError(f"cross_entropy: targets {target.shape} vs logits {logits.shape}")
    if target.size and (target.min() < 0 or target.max() >= V):
        raise IndexError(f"cross_entropy: target out of range [0, {V})")
    flat = logits.data.reshape(-1, V)
    t = target.reshape(-1)
    z = flat - flat.max(axis=-1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=-1, keepdims=True))
    n = flat.shape[0]
    loss = -logp[np.arange(n), t].mean()

    def bw(g):
        p = np.exp(logp)
        p[np.arange(n), t] -= 1.0
        return ((g * p / n).reshape(logits.shape),)

    return _make(np.asarray(loss, dtype=logits.data.dtype), (logits,), bw)


# ---------------------------------------------------------------------------
# reverse pass


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` of every grad-enabled leaf that ``loss`` depends on.

    The graph below ``loss`` is freed afterwards, so a second call on the
    same loss raises :class:`ContractError`.
    """
    if loss.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss._consumed:
        raise ContractError("backward already ran on this loss; rebuild the graph first")
    if not loss.requires_grad:
        raise ContractError("loss does not depend on any grad-enabled tensor")

    nodes: dict[int, Tensor] = {}
    stack_ = [loss]
    while stack_:
        t = stack_.pop()
        if id(t) in nodes:
            continue
        nodes[id(t)] = t
        stack_.extend(p for p in t._parents if p.requires_grad)

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for t in sorted(nodes.values(), key=lambda n: n._seq, reverse=True):
        g = grads.pop(id(t), None)
        if g is None:
            continue
        if t._backward is None:
            t.grad = g.copy() if t.grad is None else t.grad + g
            continue
        for p, pg in zip(t._parents, t._backward(g)):
            if pg is None or not p.requires_grad:
                continue
            k = id(p)
            grads[k] = pg if k not in grads else grads[k] + pg
    for t in nodes.values():
        if t._backward is not None:
            t._parents = ()
            t._backward = None
            t.requires_grad = False
    loss._consumed = True


def grad_check(f: Callable[[Tensor], Tensor], x, step: float = 1e-3) -> float:
    """Worst relative error between backward grads and central differences.

    ``x`` is evaluated in float64 so that the finite-difference side is not
    swamped by float32 rounding; pass a float32 array to check at that
    precision instead.
    """
    x0 = np.array(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
    xt = Tensor(x0.copy(), requires_grad=True, dtype=x0.dtype)
    out = f(xt)
    backward(out)
    analytic = xt.grad
    numeric = np.zeros_like(x0)
    flat = x0.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        fp = f(Tensor(x0, dtype=x0.dtype)).item()
        flat[i] = orig - step
        fm = f(Tensor(x0, dtype=x0.dtype)).item()
        flat[i] = orig
        numeric.reshape(-1)[i] = (fp - fm) / (2 * step)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
    return float(np.max(np.abs(analytic - numeric) / denom))
