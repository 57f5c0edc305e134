"""Minimal reverse-mode automatic differentiation over float64 numpy arrays.

Every differentiable operation builds a node holding its parents and a
closure that maps the upstream gradient to one gradient per parent.
``Tensor.backward`` walks the graph in reverse topological order.
"""

from __future__ import annotations

import contextlib
import threading
from typing import Callable, Sequence

import numpy as np

# per thread, so evaluation workers cannot toggle graph building for each other
_STATE = threading.local()


def grad_enabled() -> bool:
    return getattr(_STATE, "enabled", True)


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


@contextlib.contextmanager
def no_grad():
    """Disable graph construction inside the block."""
    prev = grad_enabled()
    _STATE.enabled = False
    try:
        yield
    finally:
        _STATE.enabled = prev


class Tensor:
    """Dense array with optional gradient tracking.

    Leaf tensors created with ``requires_grad=True`` own a zero-initialised
    ``grad`` buffer. Non-leaf tensors receive ``grad`` during ``backward``.
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "op")
    __array_priority__ = 100.0

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.array(data, dtype=np.float64) if not isinstance(data, np.ndarray) \
            else data.astype(np.float64, copy=False)
        self.requires_grad = bool(requires_grad)
        self.grad = np.zeros_like(self.data) if requires_grad else None
        self._parents: tuple = ()
        self._backward: Callable | None = None
        self.op = "leaf"

    # -- introspection -------------------------------------------------
    @property
    def shape(self) -> tuple:
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
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else self.data.item()

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        if self.requires_grad:
            self.grad = np.zeros_like(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor({self.data!r}{flag})"

    def __len__(self) -> int:
        return len(self.data)

    # -- backward ------------------------------------------------------
    def backward(self, grad=None) -> None:
        """Accumulate d(self)/d(leaf) into every reachable leaf's ``grad``.

        Only scalar outputs are accepted unless an explicit upstream ``grad``
        is given. Repeated calls accumulate into leaf gradients.
        """
        if grad is None:
            if self.data.size != 1:
                raise ValueError(
                    f"backward() needs a scalar output, got shape {self.shape}")
            grad = np.ones_like(self.data)
        if not self.requires_grad:
            return

        order = _topological_order(self)
        grads = {id(self): np.asarray(grad, dtype=np.float64)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            node.grad = g
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg

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
        return neg(self)

    def __pow__(self, exponent):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    @property
    def T(self):
        return transpose(self, None)


class Parameter(Tensor):
    """Named leaf tensor that always tracks gradients."""

    __slots__ = ("name",)

    def __init__(self, data, name: str):
        super().__init__(data, requires_grad=True)
        self.name = name

    def __repr__(self) -> str:
        return f"Parameter({self.name!r}, shape={self.shape})"


def _topological_order(root: Tensor) -> list:
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
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


def _node(data, parents: Sequence[Tensor], backward: Callable, op: str) -> Tensor:
    out = Tensor(data)
    if grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
        out.op = op
    return out


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


def _broadcast_shapes(a: Tensor, b: Tensor, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from None


# -- elementwise arithmetic ---------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shapes(a, b, "add")
    return _node(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)), "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shapes(a, b, "sub")
    return _node(a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)), "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shapes(a, b, "mul")
    return _node(a.data * b.data, (a, b),
                 lambda g: (_unbroadcast(g * b.data, a.shape),
                            _unbroadcast(g * a.data, b.shape)), "mul")


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shapes(a, b, "div")
    out = a.data / b.data
    return _node(out, (a, b),
                 lambda g: (_unbroadcast(g / b.data, a.shape),
                            _unbroadcast(-g * out / b.data, b.shape)), "div")


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _node(-a.data, (a,), lambda g: (-g,), "neg")


def power(a, exponent: float) -> Tensor:
    a = as_tensor(a)
    p = float(exponent)
    return _node(a.data ** p, (a,), lambda g: (g * p * a.data ** (p - 1.0),), "pow")


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return _node(out, (a,), lambda g: (g * out,), "exp")


def log(a) -> Tensor:
    a = as_tensor(a)
    return _node(np.log(a.data), (a,), lambda g: (g / a.data,), "log")


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0
    return _node(a.data * mask, (a,), lambda g: (g * mask,), "relu")


def absolute(a) -> Tensor:
    a = as_tensor(a)
    sign = np.sign(a.data)
    return _node(np.abs(a.data), (a,), lambda g: (g * sign,), "abs")


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    out = _stable_sigmoid(a.data)
    return _node(out, (a,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def _stable_sigmoid(z: np.ndarray) -> np.ndarray:
    e = np.exp(-np.abs(z))
    return np.where(z >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def minimum(a, b) -> Tensor:
    """Elementwise minimum; ties send the gradient to ``a``."""
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shapes(a, b, "minimum")
    pick_a = a.data <= b.data
    return _node(np.where(pick_a, a.data, b.data), (a, b),
                 lambda g: (_unbroadcast(g * pick_a, a.shape),
                            _unbroadcast(g * ~pick_a, b.shape)), "minimum")


def maximum(a, b) -> Tensor:
    """Elementwise maximum; ties send the gradient to ``a``."""
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shapes(a, b, "maximum")
    pick_a = a.data >= b.data
    return _node(np.where(pick_a, a.data, b.data), (a, b),
                 lambda g: (_unbroadcast(g * pick_a, a.shape),
                            _unbroadcast(g * ~pick_a, b.shape)), "maximum")


def clip(a, lo: float, hi: float) -> Tensor:
    """Clamp to ``[lo, hi]``; the gradient is zero where clamping is active."""
    a = as_tensor(a)
    inside = (a.data >= lo) & (a.data <= hi)
    return _node(np.clip(a.data, lo, hi), (a,), lambda g: (g * inside,), "clip")


# -- reductions and shape ops ---------------------------------------------

def _expand_reduced(g: np.ndarray, shape: tuple, axis, keepdims: bool) -> np.ndarray:
    if axis is not None and not keepdims:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        axes = tuple(ax % len(shape) for ax in axes)
        g = np.expand_dims(g, axes)
    return np.broadcast_to(g, shape)


def tsum(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    return _node(a.data.sum(axis=axis, keepdims=keepdims), (a,),
                 lambda g: (_expand_reduced(g, a.shape, axis, keepdims).copy(),), "sum")


def mean(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    out = a.data.mean(axis=axis, keepdims=keepdims)
    count = a.data.size / max(out.size, 1) if a.data.size else 1.0
    return _node(out, (a,),
                 lambda g: (_expand_reduced(g, a.shape, axis, keepdims) / count,), "mean")


def _extreme(a, axis: int, largest: bool) -> Tensor:
    a = as_tensor(a)
    axis = axis % a.ndim
    if largest:
        # last index among ties
        flipped = np.flip(a.data, axis=axis)
        idx = a.shape[axis] - 1 - np.argmax(flipped, axis=axis)
    else:
        idx = np.argmin(a.data, axis=axis)
    idx_k = np.expand_dims(idx, axis)
    out = np.take_along_axis(a.data, idx_k, axis=axis).squeeze(axis)

    def backward(g):
        full = np.zeros_like(a.data)
        np.put_along_axis(full, idx_k, np.expand_dims(g, axis), axis=axis)
        return (full,)

    return _node(out, (a,), backward, "amax" if largest else "amin")


def amax(a, axis: int = -1) -> Tensor:
    """Maximum along ``axis``; the subgradient goes to the LAST maximiser."""
    return _extreme(a, axis, largest=True)


def amin(a, axis: int = -1) -> Tensor:
    """Minimum along ``axis``; the subgradient goes to the FIRST minimiser."""
    return _extreme(a, axis, largest=False)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    return _node(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),), "reshape")


def transpose(a, axes=None) -> Tensor:
    a = as_tensor(a)
    inv = None if axes is None else tuple(np.argsort(axes))
    return _node(np.transpose(a.data, axes), (a,),
                 lambda g: (np.transpose(g, inv),), "transpose")


def swapaxes(a, ax1: int, ax2: int) -> Tensor:
    a = as_tensor(a)
    return _node(np.swapaxes(a.data, ax1, ax2), (a,),
                 lambda g: (np.swapaxes(g, ax1, ax2),), "swapaxes")


def getitem(a, index) -> Tensor:
    a = as_tensor(a)

    def backward(g):
        full = np.zeros_like(a.data)
        np.add.at(full, index, g)
        return (full,)

    return _node(a.data[index], (a,), backward, "getitem")


def concat(xs: Sequence, axis: int = -1) -> Tensor:
    xs = [as_tensor(x) for x in xs]
    ref = xs[0].shape
    ax = axis % len(ref)
    for x in xs[1:]:
        if x.ndim != len(ref) or any(x.shape[i] != ref[i] for i in range(len(ref)) if i != ax):
            raise ShapeError(
                f"concat: shapes {ref} and {x.shape} differ off axis {axis}")
    splits = np.cumsum([x.shape[ax] for x in xs])[:-1]
    return _node(np.concatenate([x.data for x in xs], axis=ax), xs,
                 lambda g: tuple(np.split(g, splits, axis=ax)), "concat")


# -- linear algebra -------------------------------------------------------

def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: cannot multiply shapes {a.shape} and {b.shape}")
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise ShapeError(f"matmul: batch shapes {a.shape} and {b.shape} differ") from None

    def backward(g):
        ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape)
        gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape)
        return ga, gb

    return _node(a.data @ b.data, (a, b), backward, "matmul")


def linear(x, weight, bias=None) -> Tensor:
    """``x @ weight + bias`` with ``weight`` of shape (in, out)."""
    x, weight = as_tensor(x), as_tensor(weight)
    if weight.ndim != 2 or x.shape[-1] != weight.shape[0]:
        raise ShapeError(f"linear: input {x.shape} does not fit weight {weight.shape}")
    out = x.data @ weight.data
    parents = [x, weight]
    if bias is not None:
        bias = as_tensor(bias)
        if bias.shape != (weight.shape[1],):
            raise ShapeError(f"linear: bias {bias.shape} does not fit weight {weight.shape}")
        out = out + bias.data
        parents.append(bias)

    def backward(g):
        gx = g @ weight.data.T
        g2 = g.reshape(-1, g.shape[-1])
        gw = x.data.reshape(-1, x.shape[-1]).T @ g2
        if bias is None:
            return gx, gw
        return gx, gw, g2.sum(axis=0)

    return _node(out, parents, backward, "linear")


# -- normalisation --------------------------------------------------------

def softmax(x, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)
    return _node(out, (x,),
                 lambda g: (out * (g - (g * out).sum(axis=axis, keepdims=True)),), "softmax")


def log_softmax(x, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    z = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse
    soft = np.exp(out)
    return _node(out, (x,),
                 lambda g: (g - soft * g.sum(axis=axis, keepdims=True),), "log_softmax")


def layer_norm(x, gain=None, bias=None, axis: int = -1, eps: float = 1e-5) -> Tensor:
    """Normalise to zero mean / unit variance along ``axis``, then scale and shift.

    ``gain`` and ``bias`` have shape ``(x.shape[axis],)``.
    """
    x = as_tensor(x)
    axis = axis % x.ndim
    n = x.shape[axis]
    if n < 2:
        raise ShapeError(f"layer_norm: axis {axis} of {x.shape} has extent < 2")
    bshape = [1] * x.ndim
    bshape[axis] = n
    mu = x.data.mean(axis=axis, keepdims=True)
    xc = x.data - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=axis, keepdims=True) + eps)
    xhat = xc * inv
    parents = [x]
    out = xhat
    if gain is not None:
        gain = as_tensor(gain)
        out = out * gain.data.reshape(bshape)
        parents.append(gain)
    if bias is not None:
        bias = as_tensor(bias)
        out = out + bias.data.reshape(bshape)
        parents.append(bias)
    other = tuple(i for i in range(x.ndim) if i != axis)

    def backward(g):
        gh = g * gain.data.reshape(bshape) if gain is not None else g
        gx = inv * (gh - gh.mean(axis=axis, keepdims=True)
                    - xhat * (gh * xhat).mean(axis=axis, keepdims=True))
        grads = [gx]
        if gain is not None:
            grads.append((g * xhat).sum(axis=other))
        if bias is not None:
            grads.append(g.sum(axis=other))
        return grads

    return _node(out, parents, backward, "layer_norm")


# -- losses ---------------------------------------------------------------

def bce_with_logits(logits, targets) -> Tensor:
    """Elementwise binary cross-entropy of ``sigmoid(logits)`` against constant targets."""
    z = as_tensor(logits)
    y = np.asarray(targets.data if isinstance(targets, Tensor) else targets, dtype=np.float64)
    if y.shape != z.shape:
        raise ShapeError(f"bce_with_logits: logits {z.shape} vs targets {y.shape}")
    out = np.maximum(z.data, 0.0) - z.data * y + np.log1p(np.exp(-np.abs(z.data)))
    return _node(out, (z,), lambda g: (g * (_stable_sigmoid(z.data) - y),), "bce_with_logits")


# -- interpolation --------------------------------------------------------

def interp1d(features, positions) -> Tensor:
    """Linear interpolation of feature rows at fractional positions.

    ``features`` has shape (..., T, D) and ``positions`` shape (..., M) in
    row-index units with matching leading dims. Positions are clamped to
    ``[0, T-1]``; the positional gradient is zero where the clamp is active.
    Returns shape (..., M, D).
    """
    X, pos = as_tensor(features), as_tensor(positions)
    if X.ndim < 2 or X.shape[:-2] != pos.shape[:-1]:
        raise ShapeError(f"interp1d: features {X.shape} vs positions {pos.shape}")
    lead = X.shape[:-2]
    T, D = X.shape[-2:]
    M = pos.shape[-1]
    Xf = X.data.reshape(-1, T, D)
    pf = pos.data.reshape(-1, M)
    N = Xf.shape[0]
    clamped = np.clip(pf, 0.0, T - 1.0)
    inside = (pf >= 0.0) & (pf <= T - 1.0)

    if T == 1:
        out = np.repeat(Xf[:, :1, :], M, axis=1)

        def backward(g):
            gX = g.reshape(N, M, D).sum(axis=1, keepdims=True)
            return gX.reshape(X.shape), np.zeros_like(pos.data)

        return _node(out.reshape(*lead, M, D), (X, pos), backward, "interp1d")

    lo = np.minimum(np.floor(clamped).astype(np.int64), T - 2)
    frac = clamped - lo
    weights = np.zeros((N, M, T))
    rows = np.arange(N)[:, None]
    cols = np.arange(M)[None, :]
    weights[rows, cols, lo] = 1.0 - frac
    weights[rows, cols, lo + 1] += frac
    out = weights @ Xf

    def backward(g):
        g = g.reshape(N, M, D)
        gX = np.swapaxes(weights, 1, 2) @ g
        diff = Xf[:, 1:, :] - Xf[:, :-1, :]
        slope = np.take_along_axis(diff, lo[:, :, None], axis=1)
        gpos = (slope * g).sum(axis=-1) * inside
        return gX.reshape(X.shape), gpos.reshape(pos.shape)

    return _node(out.reshape(*lead, M, D), (X, pos), backward, "interp1d")


def bilinear_interp_1d(features, t) -> Tensor:
    """Interpolate one row of ``features`` (T, D) at scalar index ``t``."""
    X = as_tensor(features)
    t = as_tensor(t)
    return reshape(interp1d(reshape(X, (1,) + X.shape), reshape(t, (1, 1))), (X.shape[-1],))
