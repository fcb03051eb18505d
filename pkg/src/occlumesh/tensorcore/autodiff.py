"""Dense-tensor math with reverse-mode automatic differentiation.

Tensors wrap float64 numpy arrays. Operations executed while a Tape is
active are recorded on it; ``backward(tape, seed)`` replays the tape in
reverse and accumulates gradients into ``Tensor.grad``. Tensors are value
semantics: their data must never be mutated after construction.
"""

from __future__ import annotations

import numpy as np
from scipy.special import expit

__all__ = [
    "Tensor",
    "Tape",
    "no_grad",
    "backward",
    "as_tensor",
    "concat",
    "stack",
    "sigmoid",
    "softplus",
    "relu",
    "exp",
    "log",
    "sqrt",
    "sin",
    "cos",
    "absolute",
    "maximum",
    "minimum",
    "clip",
    "matmul",
    "cumsum",
    "where",
]

_TAPE_STACK: list["Tape | None"] = []


class Tape:
    """Ordered record of differentiable operations for one backward pass."""

    def __init__(self):
        self._nodes: list[Tensor] = []
        self._consumed = False

    def __enter__(self):
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, *exc):
        popped = _TAPE_STACK.pop()
        assert popped is self

    def _record(self, node: "Tensor"):
        self._nodes.append(node)

    def __len__(self):
        return len(self._nodes)


class no_grad:
    """Context that disables recording even if an outer tape is active."""

    def __enter__(self):
        _TAPE_STACK.append(None)
        return self

    def __exit__(self, *exc):
        _TAPE_STACK.pop()


def _active_tape() -> Tape | None:
    return _TAPE_STACK[-1] if _TAPE_STACK else None


def _accum(t: "Tensor", g) -> None:
    """Accumulate a gradient contribution into ``t.grad``."""
    if t.grad is None:
        t.grad = np.array(g, dtype=np.float64)
    else:
        t.grad += g


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum grad over broadcast dimensions so it matches ``shape``."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_bwd")

    # make ndarray <op> Tensor defer to our reflected operators instead of
    # numpy broadcasting the Tensor as a 0-d object scalar
    __array_ufunc__ = None
    __array_priority__ = 1000

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._bwd = None

    # -- introspection -------------------------------------------------
    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.data.shape}{tag}, requires_grad={self.requires_grad})"

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    # -- graph plumbing ------------------------------------------------
    def _zero_grad_buffer(self):
        if self.grad is None:
            self.grad = np.zeros_like(self.data)

    # -- operators -----------------------------------------------------
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
        return mul(self, -1.0)

    def __pow__(self, p):
        return pow_const(self, p)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        return reshape(self, shape if len(shape) > 1 or isinstance(shape[0], int) else shape[0])

    def transpose(self, *axes):
        return transpose(self, axes or None)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data, parents, bwd) -> Tensor:
    """Create an op result, recording it if some parent needs gradients."""
    tape = _active_tape()
    out = Tensor(data)
    if tape is not None and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._bwd = bwd
        tape._record(out)
    return out


def backward(tape: Tape, seed: Tensor | np.ndarray | None = None,
             params: dict[str, Tensor] | None = None) -> dict[str, Tensor] | None:
    """Run reverse-mode accumulation over ``tape``.

    ``seed`` must match the shape of the tape's final node (defaults to
    ones). Gradients accumulate into ``Tensor.grad``. When ``params`` is
    given, returns named gradient tensors, zeros for unreached entries.
    """
    if tape._consumed:
        raise RuntimeError("tape already consumed by a previous backward call")
    if not tape._nodes:
        raise RuntimeError("backward on empty tape")
    tape._consumed = True
    root = tape._nodes[-1]
    seed_arr = np.ones_like(root.data) if seed is None else np.asarray(
        seed.data if isinstance(seed, Tensor) else seed, dtype=np.float64)
    if seed_arr.shape != root.data.shape:
        raise ValueError(
            f"seed shape {seed_arr.shape} does not match output shape {root.data.shape}")
    if params is not None:
        for p in params.values():
            p.grad = None  # drop any residue from a previous backward
    _accum(root, seed_arr)
    for node in reversed(tape._nodes):
        if node.grad is None or node._bwd is None:
            continue
        node._bwd(node.grad)
        node.grad = None  # intermediate grads are not needed again
    if params is not None:
        out = {}
        for name, p in params.items():
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            out[name] = Tensor(g)
        return out
    return None


def zero_grads(tensors):
    for t in tensors:
        t.grad = None


# ----------------------------------------------------------------------
# primitive ops
# ----------------------------------------------------------------------

def add(a, b):
    a, b = as_tensor(a), as_tensor(b)

    def bwd(g):
        if a.requires_grad:
            _accum(a, _unbroadcast(g, a.data.shape))
        if b.requires_grad:
            _accum(b, _unbroadcast(g, b.data.shape))

    return _make(a.data + b.data, (a, b), bwd)


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)

    def bwd(g):
        if a.requires_grad:
            _accum(a, _unbroadcast(g, a.data.shape))
        if b.requires_grad:
            _accum(b, _unbroadcast(-g, b.data.shape))

    return _make(a.data - b.data, (a, b), bwd)


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)

    def bwd(g):
        if a.requires_grad:
            _accum(a, _unbroadcast(g * b.data, a.data.shape))
        if b.requires_grad:
            _accum(b, _unbroadcast(g * a.data, b.data.shape))

    return _make(a.data * b.data, (a, b), bwd)


def div(a, b):
    a, b = as_tensor(a), as_tensor(b)

    def bwd(g):
        if a.requires_grad:
            _accum(a, _unbroadcast(g / b.data, a.data.shape))
        if b.requires_grad:
            _accum(b, _unbroadcast(-g * a.data / (b.data * b.data), b.data.shape))

    return _make(a.data / b.data, (a, b), bwd)


def pow_const(a, p: float):
    a = as_tensor(a)
    out_data = a.data ** p

    def bwd(g):
        if a.requires_grad:
            _accum(a, g * p * a.data ** (p - 1))

    return _make(out_data, (a,), bwd)


def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)

    def bwd(g):
        if a.requires_grad:
            _accum(a, _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.data.shape))
        if b.requires_grad:
            _accum(b, _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.data.shape))

    return _make(a.data @ b.data, (a, b), bwd)


def exp(a):
    a = as_tensor(a)
    out_data = np.exp(a.data)

    def bwd(g):
        if a.requires_grad:
            _accum(a, g * out_data)

    return _make(out_data, (a,), bwd)


def log(a):
    a = as_tensor(a)

    def bwd(g):
        if a.requires_grad:
            _accum(a, g / a.data)

    return _make(np.log(a.data), (a,), bwd)


def sqrt(a):
    a = as_tensor(a)
    out_data = np.sqrt(a.data)

    def bwd(g):
        if a.requires_grad:
            _accum(a, g * 0.5 / out_data)

    return _make(out_data, (a,), bwd)


def sin(a):
    a = as_tensor(a)

    def bwd(g):
        if a.requires_grad:
            _accum(a, g * np.cos(a.data))

    return _make(np.sin(a.data), (a,), bwd)


def cos(a):
    a = as_tensor(a)

    def bwd(g):
        if a.requires_grad:
            _accum(a, -g * np.sin(a.data))

    return _make(np.cos(a.data), (a,), bwd)


def absolute(a):
    a = as_tensor(a)

    def bwd(g):
        if a.requires_grad:
            _accum(a, g * np.sign(a.data))

    return _make(np.abs(a.data), (a,), bwd)


def sigmoid(a):
    a = as_tensor(a)
    out_data = expit(a.data)  # numerically stable both directions

    def bwd(g):
        if a.requires_grad:
            _accum(a, g * out_data * (1.0 - out_data))

    return _make(out_data, (a,), bwd)


def softplus(a, beta: float = 1.0):
    """softplus(x) = log(1 + exp(beta*x)) / beta, linear for large beta*x."""
    a = as_tensor(a)
    z = beta * a.data
    out_data = np.logaddexp(0.0, z) / beta  # = log(1+exp(z))/beta, overflow-safe

    def bwd(g):
        if a.requires_grad:
            _accum(a, g * expit(z))

    return _make(out_data, (a,), bwd)


def relu(a):
    a = as_tensor(a)
    mask = a.data > 0

    def bwd(g):
        if a.requires_grad:
            _accum(a, g * mask)

    return _make(a.data * mask, (a,), bwd)


def maximum(a, b):
    a, b = as_tensor(a), as_tensor(b)
    take_a = a.data >= b.data  # ties go to the first argument

    def bwd(g):
        if a.requires_grad:
            _accum(a, _unbroadcast(g * take_a, a.data.shape))
        if b.requires_grad:
            _accum(b, _unbroadcast(g * (~take_a), b.data.shape))

    return _make(np.maximum(a.data, b.data), (a, b), bwd)


def minimum(a, b):
    a, b = as_tensor(a), as_tensor(b)
    take_a = a.data <= b.data

    def bwd(g):
        if a.requires_grad:
            _accum(a, _unbroadcast(g * take_a, a.data.shape))
        if b.requires_grad:
            _accum(b, _unbroadcast(g * (~take_a), b.data.shape))

    return _make(np.minimum(a.data, b.data), (a, b), bwd)


def clip(a, lo: float | None, hi: float | None):
    a = as_tensor(a)
    inside = np.ones(a.data.shape, dtype=bool)
    if lo is not None:
        inside &= a.data >= lo
    if hi is not None:
        inside &= a.data <= hi

    def bwd(g):
        if a.requires_grad:
            _accum(a, g * inside)

    return _make(np.clip(a.data, lo, hi), (a,), bwd)


def where(cond: np.ndarray, a, b):
    a, b = as_tensor(a), as_tensor(b)
    cond = np.asarray(cond, dtype=bool)

    def bwd(g):
        if a.requires_grad:
            _accum(a, _unbroadcast(g * cond, a.data.shape))
        if b.requires_grad:
            _accum(b, _unbroadcast(g * (~cond), b.data.shape))

    return _make(np.where(cond, a.data, b.data), (a, b), bwd)


def tsum(a, axis=None, keepdims=False):
    a = as_tensor(a)

    def bwd(g):
        if a.requires_grad:
            a._zero_grad_buffer()
            gg = g
            if axis is not None and not keepdims:
                gg = np.expand_dims(g, axis)
            a.grad += np.broadcast_to(gg, a.data.shape)

    return _make(a.data.sum(axis=axis, keepdims=keepdims), (a,), bwd)


def tmean(a, axis=None, keepdims=False):
    a = as_tensor(a)
    if axis is None:
        n = a.data.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        n = int(np.prod([a.data.shape[ax] for ax in axes]))

    def bwd(g):
        if a.requires_grad:
            a._zero_grad_buffer()
            gg = g
            if axis is not None and not keepdims:
                gg = np.expand_dims(g, axis)
            a.grad += np.broadcast_to(gg, a.data.shape) / n

    return _make(a.data.mean(axis=axis, keepdims=keepdims), (a,), bwd)


def cumsum(a, axis: int):
    a = as_tensor(a)

    def bwd(g):
        if a.requires_grad:
            _accum(a, np.flip(np.cumsum(np.flip(g, axis), axis=axis), axis))

    return _make(np.cumsum(a.data, axis=axis), (a,), bwd)


def reshape(a, shape):
    a = as_tensor(a)
    old = a.data.shape

    def bwd(g):
        if a.requires_grad:
            _accum(a, g.reshape(old))

    return _make(a.data.reshape(shape), (a,), bwd)


def transpose(a, axes=None):
    a = as_tensor(a)
    if axes is None:
        axes = tuple(reversed(range(a.data.ndim)))
    inv = np.argsort(axes)

    def bwd(g):
        if a.requires_grad:
            _accum(a, g.transpose(inv))

    return _make(a.data.transpose(axes), (a,), bwd)


def getitem(a, idx):
    a = as_tensor(a)

    def bwd(g):
        if a.requires_grad:
            a._zero_grad_buffer()
            np.add.at(a.grad, idx, g)

    return _make(a.data[idx], (a,), bwd)


def concat(tensors, axis: int = -1):
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.data.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def bwd(g):
        parts = np.split(g, splits, axis=axis)
        for t, gp in zip(tensors, parts):
            if t.requires_grad:
                _accum(t, gp)

    return _make(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), bwd)


def stack(tensors, axis: int = 0):
    tensors = [as_tensor(t) for t in tensors]

    def bwd(g):
        parts = np.split(g, len(tensors), axis=axis)
        for t, gp in zip(tensors, parts):
            if t.requires_grad:
                _accum(t, gp.squeeze(axis))

    return _make(np.stack([t.data for t in tensors], axis=axis), tuple(tensors), bwd)


def custom_op(data: np.ndarray, parents, bwd) -> Tensor:
    """Escape hatch for fused ops (convolution, bilinear sampling, ...).

    ``bwd(g)`` must accumulate into each requiring parent's ``.grad``.
    """
    return _make(data, tuple(parents), bwd)
