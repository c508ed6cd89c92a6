"""Dense float64 tensors with reverse-mode automatic differentiation.

Every numerical primitive in this package runs through the ops defined
here. Values are numpy float64 arrays; each op that participates in a
gradient computation records its parents and a backward closure, and
``Tensor.backward()`` replays the recording in reverse execution order.

Documented conventions (oracles depend on these):
  * relu subgradient at 0 is 0,
  * window max pooling breaks ties to the first occurrence in row-major
    scan order,
  * non-divisible pooling windows replicate-pad on the right/bottom.
"""

from __future__ import annotations

import itertools
from typing import Callable, Iterable, Sequence

import numpy as np


class ShapeError(ValueError):
    """Operand shapes are incompatible for the requested op."""


class ParameterError(ValueError):
    """An op parameter (window size, temperature, step size) is invalid."""


class DomainError(ValueError):
    """Input lies outside the mathematical domain of the op."""


class ContractError(ValueError):
    """A caller-supplied callable violated its contract (e.g. non-scalar loss)."""


_grad_enabled = True
_seq_counter = itertools.count()


class no_grad:
    """Context manager that disables tape recording inside the block."""

    def __enter__(self):
        global _grad_enabled
        self._prev = _grad_enabled
        _grad_enabled = False
        return self

    def __exit__(self, *exc):
        global _grad_enabled
        _grad_enabled = self._prev
        return False


class Tensor:
    """N-dimensional float64 array, optionally tracked for differentiation."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "_seq")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], tuple[np.ndarray, ...]] | None = None
        self._seq = next(_seq_counter)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def zero_grad(self):
        self.grad = None

    def backward(self, seed: np.ndarray | None = None):
        """Accumulate gradients of this tensor into every reachable parent."""
        if seed is None:
            if self.data.size != 1:
                raise ContractError(
                    f"backward() without a seed needs a scalar root, got shape {self.shape}"
                )
            seed = np.ones_like(self.data)
        Tape(self).backward(self, np.asarray(seed, dtype=np.float64))

    # -- operator sugar -------------------------------------------------
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

    def __matmul__(self, other):
        return matmul(self, other)

    def __pow__(self, p):
        return pow_scalar(self, p)

    def sum(self, axis=None, keepdims: bool = False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return tmean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, axes: Sequence[int]):
        return transpose(self, axes)

    @property
    def T(self):
        if self.ndim != 2:
            raise ShapeError(f".T is defined for 2-d tensors only, got shape {self.shape}")
        return transpose(self, (1, 0))

    def __repr__(self):
        grad_tag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{grad_tag})"


class Tape:
    """Ordered record of the ops reaching a root tensor.

    Creation order is a topological order (parents are always created
    before children), so the reverse pass walks nodes by decreasing
    sequence id and visits each exactly once. Fan-out accumulates
    additively into ``.grad``.
    """

    def __init__(self, root: Tensor):
        nodes: dict[int, Tensor] = {}
        stack = [root]
        while stack:
            t = stack.pop()
            if t._seq in nodes or not t.requires_grad:
                continue
            nodes[t._seq] = t
            stack.extend(t._parents)
        self.nodes: list[Tensor] = [nodes[s] for s in sorted(nodes, reverse=True)]

    def backward(self, root: Tensor, seed: np.ndarray):
        grads: dict[int, np.ndarray] = {root._seq: seed.astype(np.float64, copy=True)}
        for node in self.nodes:
            g = grads.pop(node._seq, None)
            if g is None:
                continue
            node.grad = g if node.grad is None else node.grad + g
            if node._backward is None:
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                if parent._seq in grads:
                    grads[parent._seq] = grads[parent._seq] + pg
                else:
                    grads[parent._seq] = pg


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _track(data: np.ndarray, parents: tuple[Tensor, ...], backward) -> Tensor:
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast gradient back down to the operand's shape."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for ax, s in enumerate(shape):
        if s == 1 and grad.shape[ax] != 1:
            grad = grad.sum(axis=ax, keepdims=True)
    return grad


# -- elementwise suite ---------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    data = a.data + b.data
    return _track(data, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    data = a.data - b.data
    return _track(data, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    data = a.data * b.data
    return _track(
        data,
        (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
    )


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    data = a.data / b.data
    return _track(
        data,
        (a, b),
        lambda g: (
            _unbroadcast(g / b.data, a.shape),
            _unbroadcast(-g * a.data / (b.data * b.data), b.shape),
        ),
    )


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _track(-a.data, (a,), lambda g: (-g,))


def pow_scalar(a, p: float) -> Tensor:
    a = as_tensor(a)
    p = float(p)
    data = a.data ** p
    return _track(data, (a,), lambda g: (g * p * a.data ** (p - 1.0),))


def exp(a) -> Tensor:
    a = as_tensor(a)
    data = np.exp(a.data)
    return _track(data, (a,), lambda g: (g * data,))


def log(a) -> Tensor:
    a = as_tensor(a)
    if np.any(a.data <= 0):
        raise DomainError(f"log of nonpositive input (min={a.data.min()})")
    data = np.log(a.data)
    return _track(data, (a,), lambda g: (g / a.data,))


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    if np.any(a.data < 0):
        raise DomainError(f"sqrt of negative input (min={a.data.min()})")
    data = np.sqrt(a.data)
    return _track(data, (a,), lambda g: (g / (2.0 * data),))


def relu(a) -> Tensor:
    a = as_tensor(a)
    data = np.maximum(a.data, 0.0)
    return _track(data, (a,), lambda g: (g * (a.data > 0),))


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    data = _sigmoid(a.data)
    return _track(data, (a,), lambda g: (g * data * (1.0 - data),))


def softplus(a) -> Tensor:
    a = as_tensor(a)
    data = np.logaddexp(0.0, a.data)
    return _track(data, (a,), lambda g: (g * _sigmoid(a.data),))


def absolute(a) -> Tensor:
    a = as_tensor(a)
    data = np.abs(a.data)
    return _track(data, (a,), lambda g: (g * np.sign(a.data),))


def clamp_min(a, low: float) -> Tensor:
    """Elementwise max with a constant; gradient passes where input >= low."""
    a = as_tensor(a)
    low = float(low)
    data = np.maximum(a.data, low)
    return _track(data, (a,), lambda g: (g * (a.data >= low),))


# -- structural ops ------------------------------------------------------

def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs >=2-d operands, got {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dimensions disagree: {a.shape} @ {b.shape}")
    data = a.data @ b.data

    def backward(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _track(data, (a, b), backward)


def transpose(a, axes: Sequence[int]) -> Tensor:
    a = as_tensor(a)
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _track(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inv),))


def reshape(a, shape: Sequence[int]) -> Tensor:
    a = as_tensor(a)
    shape = tuple(shape)
    return _track(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def tsum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    data = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is None:
            return (np.broadcast_to(g.reshape((1,) * a.ndim), a.shape).copy(),)
        gx = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(gx, a.shape).copy(),)

    return _track(data, (a,), backward)


def tmean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    data = a.data.mean(axis=axis, keepdims=keepdims)
    count = a.data.size if axis is None else a.data.size / data.size

    def backward(g):
        if axis is None:
            return (np.broadcast_to(g.reshape((1,) * a.ndim), a.shape).copy() / count,)
        gx = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(gx, a.shape).copy() / count,)

    return _track(data, (a,), backward)


def max_lastdim(a) -> Tensor:
    """Max over the last axis; gradient routes to the first argmax."""
    a = as_tensor(a)
    idx = np.argmax(a.data, axis=-1)
    data = np.take_along_axis(a.data, idx[..., None], axis=-1)[..., 0]

    def backward(g):
        gx = np.zeros_like(a.data)
        np.put_along_axis(gx, idx[..., None], g[..., None], axis=-1)
        return (gx,)

    return _track(data, (a,), backward)


def softmax_lastdim(a, temperature: float = 1.0) -> Tensor:
    """Stable softmax over the last axis of x / temperature."""
    if not temperature > 0:
        raise ParameterError(f"softmax temperature must be positive, got {temperature}")
    a = as_tensor(a)
    z = a.data / temperature
    z = z - z.max(axis=-1, keepdims=True)
    ez = np.exp(z)
    data = ez / ez.sum(axis=-1, keepdims=True)

    def backward(g):
        inner = (g * data).sum(axis=-1, keepdims=True)
        return (data * (g - inner) / temperature,)

    return _track(data, (a,), backward)


def window_max_pool(a, h: int, w: int) -> Tensor:
    """Per-channel max over h x w windows of a [C, H, W] tensor -> [C, N].

    Grids that do not divide evenly are replicate-padded on the right and
    bottom; window scan order is row-major, as is the tie-break inside a
    window. N = ceil(H/h) * ceil(W/w).
    """
    a = as_tensor(a)
    if h <= 0 or w <= 0:
        raise ParameterError(f"window size must be positive, got {h}x{w}")
    if a.ndim != 3:
        raise ShapeError(f"window_max_pool expects [C, H, W], got {a.shape}")
    c, height, width = a.shape
    nh, nw = -(-height // h), -(-width // w)
    ph, pw = nh * h - height, nw * w - width
    padded = np.pad(a.data, ((0, 0), (0, ph), (0, pw)), mode="edge")
    tiles = padded.reshape(c, nh, h, nw, w).transpose(0, 1, 3, 2, 4).reshape(c, nh * nw, h * w)
    idx = np.argmax(tiles, axis=-1)
    data = np.take_along_axis(tiles, idx[..., None], axis=-1)[..., 0]

    # Map padded coordinates back to their replicate-source cells.
    win_i, win_j = np.divmod(np.arange(nh * nw), nw)
    py = win_i[None, :] * h + idx // w
    px = win_j[None, :] * w + idx % w
    src_y = np.minimum(py, height - 1)
    src_x = np.minimum(px, width - 1)
    chan = np.broadcast_to(np.arange(c)[:, None], idx.shape)

    def backward(g):
        gx = np.zeros_like(a.data)
        np.add.at(gx, (chan, src_y, src_x), g)
        return (gx,)

    return _track(data, (a,), backward)


def gather_flat(a, indices) -> Tensor:
    """Pick elements of the flattened tensor; output takes the index shape."""
    a = as_tensor(a)
    idx = np.asarray(indices, dtype=np.intp)
    if idx.size and (idx.min() < 0 or idx.max() >= a.size):
        raise ShapeError(f"gather index out of range for size {a.size}")
    flat = a.data.reshape(-1)
    data = flat[idx]

    def backward(g):
        gx = np.zeros(a.size, dtype=np.float64)
        np.add.at(gx, idx.reshape(-1), g.reshape(-1))
        return (gx.reshape(a.shape),)

    return _track(data, (a,), backward)


def pad2d(a, top: int, bottom: int, left: int, right: int) -> Tensor:
    """Zero-pad the last two axes."""
    a = as_tensor(a)
    if min(top, bottom, left, right) < 0:
        raise ParameterError("pad widths must be nonnegative")
    width = [(0, 0)] * (a.ndim - 2) + [(top, bottom), (left, right)]
    data = np.pad(a.data, width, mode="constant")
    h, w = a.shape[-2], a.shape[-1]

    def backward(g):
        sl = (Ellipsis, slice(top, top + h), slice(left, left + w))
        return (g[sl],)

    return _track(data, (a,), backward)


def concat(tensors: Iterable[Tensor], axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    data = np.concatenate([t.data for t in ts], axis=axis)
    sizes = [t.shape[axis] for t in ts]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, splits, axis=axis))

    return _track(data, tuple(ts), backward)


# -- gradient checking ---------------------------------------------------

def grad_check(f, x: Tensor, h: float = 1e-5) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``f`` must be a deterministic scalar-valued function of ``x``; the
    relative error per coordinate is |analytic - fd| / max(1, |analytic|).
    """
    if not (1e-7 <= h <= 1e-3):
        raise ParameterError(f"step size h must lie in [1e-7, 1e-3], got {h}")
    if not x.requires_grad:
        raise ContractError("grad_check target must have requires_grad=True")

    saved_grad = x.grad
    x.grad = None
    out = f(x)
    if not isinstance(out, Tensor) or out.size != 1:
        raise ContractError("grad_check needs a scalar-valued computation")
    out.backward()
    analytic = np.zeros_like(x.data) if x.grad is None else x.grad.copy()
    x.grad = saved_grad

    fd = np.zeros_like(x.data)
    flat = x.data.reshape(-1)
    fd_flat = fd.reshape(-1)
    with no_grad():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            hi = f(x).item()
            flat[i] = orig - h
            lo = f(x).item()
            flat[i] = orig
            fd_flat[i] = (hi - lo) / (2.0 * h)
    rel = np.abs(analytic - fd) / np.maximum(1.0, np.abs(analytic))
    return float(rel.max()) if rel.size else 0.0
