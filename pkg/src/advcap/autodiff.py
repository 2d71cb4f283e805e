"""Tape-based reverse-mode differentiation over float64 numpy arrays.

Operations only record themselves while a :class:`Tape` is active and at
least one input requires a gradient, so inference outside a tape costs
nothing beyond the numpy work::

    with Tape() as tape:
        loss = (affine(x, w, b) ** 2).sum()
    grads = tape.backward(loss)   # {w: dL/dw, b: dL/db}
"""
from __future__ import annotations

import contextvars
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import ConfigError, ContractError, OracleError, ParameterError

_ACTIVE_TAPE: contextvars.ContextVar["Tape | None"] = contextvars.ContextVar(
    "advcap_active_tape", default=None
)


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "name", "_parents", "_backward")
    __array_ufunc__ = None   # ndarray op Tensor defers to Tensor's reflected operator

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag}, requires_grad={self.requires_grad})"

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

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, exponent: float):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None, keepdims: bool = False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


class Tape:
    """Ordered record of the operations executed while it is active.

    Nodes are appended in creation order, which is a valid topological order.
    """

    def __init__(self):
        self.nodes: list[Tensor] = []
        self.gradients: dict[Tensor, np.ndarray] = {}
        self._token = None

    def __enter__(self) -> "Tape":
        self._token = _ACTIVE_TAPE.set(self)
        return self

    def __exit__(self, *exc):
        _ACTIVE_TAPE.reset(self._token)
        self._token = None
        return False

    def backward(self, loss: Tensor) -> dict[Tensor, np.ndarray]:
        return backward(loss, self)


class no_grad:
    """Suspend recording inside an active tape."""

    def __enter__(self):
        self._token = _ACTIVE_TAPE.set(None)

    def __exit__(self, *exc):
        _ACTIVE_TAPE.reset(self._token)
        return False


def backward(loss: Tensor, tape: Tape) -> dict[Tensor, np.ndarray]:
    """Populate ``tape.gradients`` (and ``.grad``) for every reachable leaf."""
    if loss.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    tape.gradients = {}
    if loss._backward is None:
        if loss.requires_grad:
            loss.grad = np.ones_like(loss.data)
            tape.gradients[loss] = loss.grad
        return tape.gradients
    pending: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    leaves: dict[int, Tensor] = {}
    for node in reversed(tape.nodes):
        g = pending.pop(id(node), None)
        if g is None:
            continue
        parent_grads = node._backward(g)
        for parent, pg in zip(node._parents, parent_grads):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if parent._backward is None:
                leaves[key] = parent
            if key in pending:
                pending[key] = pending[key] + pg
            else:
                pending[key] = pg
    for key, leaf in leaves.items():
        grad = pending[key]
        if grad.shape != leaf.shape:
            grad = grad.reshape(leaf.shape)
        leaf.grad = grad
        tape.gradients[leaf] = grad
    return tape.gradients


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: tuple[Tensor, ...], backward_fn) -> Tensor:
    tape = _ACTIVE_TAPE.get()
    if tape is not None and any(p.requires_grad for p in parents):
        out = Tensor(data, requires_grad=True)
        out._parents = parents
        out._backward = backward_fn
        tape.nodes.append(out)
        return out
    return Tensor(data)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


# elementwise arithmetic

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return _make(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return _make(a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    return _make(ad * bd, (a, b),
                 lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)))


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    out = ad / bd
    return _make(out, (a, b),
                 lambda g: (_unbroadcast(g / bd, ad.shape),
                            _unbroadcast(-g * out / bd, bd.shape)))


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _make(-a.data, (a,), lambda g: (-g,))


def power(a, exponent: float) -> Tensor:
    a = as_tensor(a)
    ad = a.data
    return _make(ad ** exponent, (a,), lambda g: (g * exponent * ad ** (exponent - 1),))


def tanh(a) -> Tensor:
    a = as_tensor(a)
    out = np.tanh(a.data)
    return _make(out, (a,), lambda g: (g * (1.0 - out * out),))


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    out = 0.5 * (1.0 + np.tanh(0.5 * a.data))
    return _make(out, (a,), lambda g: (g * out * (1.0 - out),))


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,))


def log(a) -> Tensor:
    a = as_tensor(a)
    ad = a.data
    return _make(np.log(ad), (a,), lambda g: (g / ad,))


def absolute(a) -> Tensor:
    """|x| with subgradient sign(0) = 0."""
    a = as_tensor(a)
    sign = np.sign(a.data)
    return _make(np.abs(a.data), (a,), lambda g: (g * sign,))


def clamp(a, lo: float, hi: float) -> Tensor:
    a = as_tensor(a)
    inside = (a.data >= lo) & (a.data <= hi)
    return _make(np.clip(a.data, lo, hi), (a,), lambda g: (g * inside,))


# reductions and shape plumbing

def tsum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    shape = a.shape

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _make(np.sum(a.data, axis=axis, keepdims=keepdims), (a,), bw)


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    if axis is None:
        count = a.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        count = int(np.prod([a.shape[i] for i in axes]))
    return tsum(a, axis=axis, keepdims=keepdims) * (1.0 / count)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    old = a.shape
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def transpose(a, axes=None) -> Tensor:
    a = as_tensor(a)
    inverse = None if axes is None else tuple(np.argsort(axes))
    return _make(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inverse),))


def _is_basic(index) -> bool:
    parts = index if isinstance(index, tuple) else (index,)
    return all(isinstance(i, (int, np.integer, slice)) or i is None or i is Ellipsis
               for i in parts)


def getitem(a, index) -> Tensor:
    a = as_tensor(a)
    shape = a.shape
    basic = _is_basic(index)

    def bw(g):
        out = np.zeros(shape)
        if basic:
            out[index] = g
        else:
            np.add.at(out, index, g)
        return (out,)

    return _make(a.data[index], (a,), bw)


def concat(tensors: Sequence, axis: int = -1) -> Tensor:
    tensors = tuple(as_tensor(t) for t in tensors)
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]
    return _make(np.concatenate([t.data for t in tensors], axis=axis), tensors,
                 lambda g: tuple(np.split(g, splits, axis=axis)))


def stack(tensors: Sequence, axis: int = 0) -> Tensor:
    tensors = tuple(as_tensor(t) for t in tensors)
    n = len(tensors)
    return _make(np.stack([t.data for t in tensors], axis=axis), tensors,
                 lambda g: tuple(np.take(g, i, axis=axis) for i in range(n)))


# linear algebra

def matmul(a, b) -> Tensor:
    """``a @ b`` where ``b`` is 2-D and ``a`` has any leading batch axes."""
    a, b = as_tensor(a), as_tensor(b)
    if b.ndim != 2 or a.shape[-1] != b.shape[0]:
        raise ConfigError(
            f"matmul: inner axis mismatch, input axis -1 has {a.shape[-1]} "
            f"but weight axis 0 has {b.shape[0] if b.ndim else None}")
    ad, bd = a.data, b.data

    def bw(g):
        ga = g @ bd.T
        flat_a = ad.reshape(-1, ad.shape[-1])
        gb = flat_a.T @ g.reshape(-1, g.shape[-1])
        return ga, gb

    return _make(ad @ bd, (a, b), bw)


def affine(x, weight, bias) -> Tensor:
    """``x @ weight + bias`` with shape checks naming the offending axis."""
    x, weight, bias = as_tensor(x), as_tensor(weight), as_tensor(bias)
    if weight.ndim != 2:
        raise ConfigError(f"affine: weight must be 2-D, got shape {weight.shape}")
    if x.shape[-1] != weight.shape[0]:
        raise ConfigError(
            f"affine: input axis {x.ndim - 1} has size {x.shape[-1]}, "
            f"weight axis 0 has size {weight.shape[0]}")
    if bias.shape != (weight.shape[1],):
        raise ConfigError(
            f"affine: bias axis 0 has size {bias.shape[0] if bias.ndim else None}, "
            f"weight axis 1 has size {weight.shape[1]}")
    return add(matmul(x, weight), bias)


def embedding(table, ids) -> Tensor:
    """Row lookup ``table[ids]``; ids are constant integers."""
    table = as_tensor(table)
    ids = np.asarray(ids, dtype=np.int64)
    shape = table.shape

    def bw(g):
        out = np.zeros(shape)
        np.add.at(out, ids, g)
        return (out,)

    return _make(table.data[ids], (table,), bw)


def gather(a, ids) -> Tensor:
    """Pick ``a[..., ids]`` along the last axis, one id per leading row."""
    a = as_tensor(a)
    ids = np.asarray(ids, dtype=np.int64)
    shape = a.shape
    lead = np.indices(ids.shape)
    index = (*lead, ids)

    def bw(g):
        out = np.zeros(shape)
        out[index] = g
        return (out,)

    return _make(a.data[index], (a,), bw)


# softmax family

def _check_beta(beta: float):
    if not beta > 0:
        raise ParameterError(f"beta must be positive, got {beta}")


def scaled_softmax(logits, beta: float = 1.0, axis: int = -1) -> Tensor:
    """Row-wise ``softmax(beta * logits)``."""
    _check_beta(beta)
    logits = as_tensor(logits)
    z = beta * logits.data
    z = z - z.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        inner = (g * out).sum(axis=axis, keepdims=True)
        return (beta * out * (g - inner),)

    return _make(out, (logits,), bw)


def softmax(logits, axis: int = -1) -> Tensor:
    return scaled_softmax(logits, 1.0, axis=axis)


def log_softmax(logits, beta: float = 1.0, axis: int = -1) -> Tensor:
    """Row-wise ``log softmax(beta * logits)``."""
    _check_beta(beta)
    logits = as_tensor(logits)
    z = beta * logits.data
    z = z - z.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse
    probs = np.exp(out)

    def bw(g):
        return (beta * (g - probs * g.sum(axis=axis, keepdims=True)),)

    return _make(out, (logits,), bw)


def l2_norm(a) -> Tensor:
    """Euclidean norm of all entries; the subgradient at 0 is 0."""
    a = as_tensor(a)
    norm = float(np.sqrt(np.sum(a.data * a.data)))

    def bw(g):
        if norm == 0.0:
            return (np.zeros_like(a.data),)
        return (g * a.data / norm,)

    return _make(np.asarray(norm), (a,), bw)


def straight_through(hard: np.ndarray, soft: Tensor) -> Tensor:
    """Forward value ``hard``; gradient flows to ``soft`` unchanged."""
    hard = np.asarray(hard, dtype=np.float64)
    if hard.shape != soft.shape:
        raise ConfigError(f"straight_through: hard {hard.shape} vs soft {soft.shape}")
    return _make(hard, (soft,), lambda g: (g,))


# gradient oracle

def finite_difference_check(function: Callable[[], Tensor], params: Iterable[Tensor],
                            epsilon: float = 1e-5) -> float:
    """Max relative error between tape gradients and central differences.

    ``function`` takes no arguments and reads the current values of
    ``params``; it must be deterministic.
    """
    if not 0 < epsilon <= 1e-2:
        raise ParameterError(f"epsilon must lie in (0, 1e-2], got {epsilon}")
    params = list(params)
    for p in params:
        p.requires_grad = True
    with Tape() as tape:
        loss = function()
    analytic = backward(loss, tape)

    def evaluate() -> float:
        with no_grad():
            return float(function().data)

    base = evaluate()
    if evaluate() != base or base != float(loss.data):
        raise OracleError("function is not deterministic: repeated evaluations differ")

    worst = 0.0
    for p in params:
        grad = analytic.get(p)
        if grad is None:
            grad = np.zeros_like(p.data)
        flat = p.data.reshape(-1)
        gflat = grad.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + epsilon
            up = evaluate()
            flat[i] = orig - epsilon
            down = evaluate()
            flat[i] = orig
            numeric = (up - down) / (2.0 * epsilon)
            err = abs(gflat[i] - numeric) / (abs(gflat[i]) + abs(numeric) + 1e-12)
            worst = max(worst, err)
    return worst
