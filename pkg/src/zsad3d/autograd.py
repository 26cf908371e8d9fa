"""A small tape-based reverse-mode autodiff engine over float64 numpy arrays.

Every op builds an output :class:`Tensor` that remembers its parents and a
closure mapping the output gradient to parent gradients. ``Tensor.backward``
walks the recorded graph once in reverse topological order. The op set is
exactly what the pipeline needs, not a general framework.
"""
from __future__ import annotations

import builtins
import contextlib
import math
import threading
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.special import erf

_grad_state = threading.local()   # graphs are per thread
_builtin_max = builtins.max


class GraphError(RuntimeError):
    pass


@contextlib.contextmanager
def no_grad():
    """Run forward passes without recording a graph."""
    prev = grad_enabled()
    _grad_state.enabled = False
    try:
        yield
    finally:
        _grad_state.enabled = prev


def grad_enabled() -> bool:
    return getattr(_grad_state, "enabled", True)


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_backward",
                 "_consumed", "flags")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = requires_grad
        self.name = name
        self._parents: tuple = ()
        self._backward = None
        self._consumed = False
        self.flags: dict = {}

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def __len__(self):
        return len(self.data)

    def __repr__(self):
        tag = f" {self.name}" if self.name else ""
        return f"Tensor{tag}(shape={self.shape}, requires_grad={self.requires_grad})"

    def item(self) -> float:
        return float(self.data.reshape(()))

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self):
        self.grad = None

    # operator sugar
    def __add__(self, other): return add(self, other)
    def __radd__(self, other): return add(other, self)
    def __sub__(self, other): return sub(self, other)
    def __rsub__(self, other): return sub(other, self)
    def __mul__(self, other): return mul(self, other)
    def __rmul__(self, other): return mul(other, self)
    def __neg__(self): return mul(self, -1.0)
    def __matmul__(self, other): return matmul(self, other)
    def __getitem__(self, idx): return index(self, idx)

    def backward(self):
        """Accumulate d(self)/d(leaf) into every reachable leaf's ``grad``."""
        if self.data.size != 1:
            raise GraphError(f"backward needs a scalar loss, got shape {self.shape}")
        if self._consumed:
            raise GraphError("backward already ran on this graph; rebuild it first")
        if not self.requires_grad:
            raise GraphError("loss does not depend on any parameter")
        order = _topological(self)
        grads = {id(self): np.ones_like(self.data)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._consumed:
                raise GraphError("graph segment was already backpropagated")
            if not node._parents:
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                prev = grads.get(id(parent))
                grads[id(parent)] = pg if prev is None else prev + pg
        for node in order:
            if node._parents:
                node._consumed = True
                node._backward = None
                node._parents = ()


def _topological(root: Tensor) -> list:
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data, parents: Sequence[Tensor], backward: Callable) -> Tensor:
    out = Tensor(data)
    if grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# ---------------------------------------------------------------- arithmetic

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), -_unbroadcast(g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(a.data * b.data, (a, b),
                 lambda g: (_unbroadcast(g * b.data, a.shape),
                            _unbroadcast(g * a.data, b.shape)))


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data / b.data
    return _make(out, (a, b),
                 lambda g: (_unbroadcast(g / b.data, a.shape),
                            _unbroadcast(-g * out / b.data, b.shape)))


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.shape[-1] != b.shape[-2 if b.ndim > 1 else 0]:
        raise ValueError(f"matmul shape mismatch {a.shape} @ {b.shape}")

    def backward(g):
        if b.ndim == 2 and a.ndim > 2:
            ga = g @ b.data.T
            gb = a.data.reshape(-1, a.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            return ga, gb
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _make(a.data @ b.data, (a, b), backward)


def power(a: Tensor, exponent: float) -> Tensor:
    """Elementwise ``a ** exponent`` for a constant exponent (a > 0 if fractional)."""
    a = as_tensor(a)
    out = a.data ** exponent
    if exponent == 0:
        return _make(out, (a,), lambda g: (np.zeros_like(a.data),))
    return _make(out, (a,), lambda g: (g * exponent * a.data ** (exponent - 1),))


# ------------------------------------------------------------------- shaping

def reshape(a: Tensor, shape) -> Tensor:
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def transpose(a: Tensor, axes) -> Tensor:
    inv = np.argsort(axes)
    return _make(a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),))


def broadcast_to(a: Tensor, shape) -> Tensor:
    return _make(np.broadcast_to(a.data, shape).copy(), (a,),
                 lambda g: (_unbroadcast(g, a.shape),))


def index(a: Tensor, idx) -> Tensor:
    """Basic or integer-array indexing; gradients scatter-add back."""
    def backward(g):
        full = np.zeros_like(a.data)
        np.add.at(full, idx, g)
        return (full,)
    return _make(a.data[idx], (a,), backward)


def take_rows(a: Tensor, rows) -> Tensor:
    """``a[rows]`` along axis 0 with an integer index array of any shape."""
    rows = np.asarray(rows, dtype=np.int64)

    def backward(g):
        full = np.zeros_like(a.data)
        np.add.at(full, rows, g)
        return (full,)
    return _make(a.data[rows], (a,), backward)


def concat(parts: Sequence[Tensor], axis: int = -1) -> Tensor:
    parts = [as_tensor(p) for p in parts]
    ax = axis % parts[0].ndim
    for p in parts[1:]:
        if p.ndim != parts[0].ndim or any(
                p.shape[i] != parts[0].shape[i] for i in range(p.ndim) if i != ax):
            raise ValueError("concat shape mismatch: "
                             + ", ".join(str(q.shape) for q in parts))
    sizes = np.cumsum([p.shape[ax] for p in parts])[:-1]
    return _make(np.concatenate([p.data for p in parts], axis=ax), parts,
                 lambda g: tuple(np.split(g, sizes, axis=ax)))


# -------------------------------------------------------------- reductions

def sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)
    return _make(a.data.sum(axis=axis, keepdims=keepdims), (a,), backward)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = a.data.size if axis is None else np.prod(
        [a.shape[ax] for ax in np.atleast_1d(axis)])
    return mul(sum(a, axis=axis, keepdims=keepdims), 1.0 / n)


def max(a: Tensor, axis: int) -> Tensor:  # noqa: A001
    """Max along one axis; the gradient goes only to the first argmax."""
    arg = np.expand_dims(a.data.argmax(axis=axis), axis)
    out = np.take_along_axis(a.data, arg, axis=axis).squeeze(axis)

    def backward(g):
        full = np.zeros_like(a.data)
        np.put_along_axis(full, arg, np.expand_dims(g, axis), axis=axis)
        return (full,)
    return _make(out, (a,), backward)


# ------------------------------------------------------------ elementwise

def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    return _make(np.log(a.data), (a,), lambda g: (g / a.data,))


def sigmoid(a: Tensor) -> Tensor:
    out = 0.5 * (1.0 + np.tanh(0.5 * a.data))
    return _make(out, (a,), lambda g: (g * out * (1.0 - out),))


def relu(a: Tensor) -> Tensor:
    # at exactly 0 the inactive branch is taken
    mask = a.data > 0
    return _make(a.data * mask, (a,), lambda g: (g * mask,))


_SQRT2 = math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


def gelu(a: Tensor) -> Tensor:
    """Exact (erf-based) GELU."""
    x = a.data
    cdf = 0.5 * (1.0 + erf(x / _SQRT2))
    pdf = _INV_SQRT_2PI * np.exp(-0.5 * x * x)
    return _make(x * cdf, (a,), lambda g: (g * (cdf + x * pdf),))


def clamp(a: Tensor, lo: float | None = None, hi: float | None = None) -> Tensor:
    """Clip values; clipped entries receive zero gradient."""
    x = a.data
    out = np.clip(x, lo, hi)
    inside = np.ones_like(x, dtype=bool)
    if lo is not None:
        inside &= x >= lo
    if hi is not None:
        inside &= x <= hi
    return _make(out, (a,), lambda g: (g * inside,))


# ------------------------------------------------------- composite kernels

def softmax(a: Tensor, axis: int = -1) -> Tensor:
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)
    return _make(out, (a,),
                 lambda g: (out * (g - (g * out).sum(axis=axis, keepdims=True)),))


def log_softmax(a: Tensor, axis: int = -1) -> Tensor:
    z = a.data - a.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse
    sm = np.exp(out)
    return _make(out, (a,), lambda g: (g - sm * g.sum(axis=axis, keepdims=True),))


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then scale and shift."""
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    d = x.shape[-1]

    def backward(g):
        gx_hat = g * gain.data
        gx = inv * (gx_hat - gx_hat.mean(axis=-1, keepdims=True)
                    - xhat * (gx_hat * xhat).mean(axis=-1, keepdims=True))
        ggain = (g * xhat).reshape(-1, d).sum(axis=0)
        gbias = g.reshape(-1, d).sum(axis=0)
        return gx, ggain, gbias

    return _make(xhat * gain.data + bias.data, (x, gain, bias), backward)


def l2_normalize(a: Tensor, axis: int = -1, eps: float = 0.0) -> Tensor:
    """Scale to unit norm along ``axis``.

    Zero vectors map to zero with zero gradient; the count of such rows is
    stored in ``out.flags["zero_rows"]``.
    """
    norm = np.sqrt((a.data * a.data).sum(axis=axis, keepdims=True)) + eps
    zero = norm == 0
    safe = np.where(zero, 1.0, norm)
    out = np.where(zero, 0.0, a.data / safe)

    def backward(g):
        gx = (g - out * (g * out).sum(axis=axis, keepdims=True)) / safe
        return (np.where(zero, 0.0, gx),)

    t = _make(out, (a,), backward)
    t.flags["zero_rows"] = int(zero.sum())
    return t


def cosine_similarity(a: Tensor, b: Tensor, axis: int = -1) -> Tensor:
    return sum(mul(l2_normalize(a, axis), l2_normalize(b, axis)), axis=axis)


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    out = matmul(x, weight)
    return out if bias is None else add(out, bias)


# ------------------------------------------------------------ verification

def grad_check(f: Callable[[], Tensor], params: Iterable[Tensor], h: float = 1e-5,
               return_details: bool = False, floor: float = 1e-5):
    """Largest relative error between analytic and central-difference gradients.

    ``f`` rebuilds the graph from the current parameter values on every call.
    Relative error per element is ``|a - b| / max(|a|, |b|, floor)``. Central
    differences of an O(1) loss carry ~1e-11 of rounding noise, so gradients
    far below ``floor`` are effectively held to an absolute tolerance instead.
    """
    if not 1e-7 <= h <= 1e-3:
        raise ValueError("step h must lie in [1e-7, 1e-3]")
    params = list(params)
    first, second = f(), f()
    if not np.array_equal(as_tensor(first).data, as_tensor(second).data):
        raise GraphError("function under check is not deterministic")
    for p in params:
        p.grad = None
    loss = f()
    loss.backward()
    analytic = [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]

    worst, details = 0.0, []
    with no_grad():
        for p, ga in zip(params, analytic):
            flat = p.data.reshape(-1)
            err = 0.0
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + h
                up = f().item()
                flat[i] = orig - h
                down = f().item()
                flat[i] = orig
                fd = (up - down) / (2.0 * h)
                a = ga.reshape(-1)[i]
                rel = abs(a - fd) / _builtin_max(abs(a), abs(fd), floor)
                err = rel if rel > err else err
            details.append((p.name, err))
            worst = err if err > worst else worst
    for p in params:
        p.grad = None
    return (worst, details) if return_details else worst
