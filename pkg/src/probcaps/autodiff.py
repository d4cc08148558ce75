"""Small define-by-run reverse-mode autodiff over float64 numpy arrays.

Every primitive builds its output eagerly and, when any input requires a
gradient, attaches a closure mapping the output cotangent to input
cotangents.  ``backward`` replays those closures in reverse topological
order.  The graph is rebuilt on every evaluation; nothing is cached.
"""

from __future__ import annotations

import math
from typing import Callable, Sequence

import numpy as np


class ShapeError(ValueError):
    """Operand shapes are invalid for a primitive."""

    def __init__(self, op: str, *shapes):
        self.op = op
        self.shapes = tuple(tuple(s) for s in shapes)
        super().__init__(f"{op}: incompatible shapes {', '.join(str(s) for s in self.shapes)}")


class DomainError(ValueError):
    """A primitive was evaluated outside its mathematical domain."""


class Tensor:
    """Dense float64 array that can take part in a recorded computation."""

    __array_priority__ = 100  # make ndarray <op> Tensor defer to Tensor

    def __init__(self, data, requires_grad: bool = False, _parents=(), _backward=None, _op: str = "leaf"):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._parents = _parents
        self._backward = _backward
        self._op = _op

    # -- basic properties -------------------------------------------------
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

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor({self.data!r}{flag})"

    def __len__(self) -> int:
        return len(self.data)

    # -- operators ----------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return subtract(self, other)

    def __rsub__(self, other):
        return subtract(other, self)

    def __mul__(self, other):
        return multiply(self, other)

    def __rmul__(self, other):
        return multiply(other, self)

    def __truediv__(self, other):
        return divide(self, other)

    def __rtruediv__(self, other):
        return divide(other, self)

    def __neg__(self):
        return negative(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __pow__(self, exponent):
        if exponent == 2:
            return square(self)
        return power(self, exponent)

    def __getitem__(self, index):
        return getitem(self, index)

    # -- convenience methods ------------------------------------------------
    def sum(self, axis=None, keepdims: bool = False):
        return sum_(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)

    def backward(self, grad=None):
        return backward(self, grad)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def constant(x) -> Tensor:
    return Tensor(x)


def parameter(x) -> Tensor:
    return Tensor(np.array(x, dtype=np.float64), requires_grad=True)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _make(data, parents: Sequence[Tensor], backward_fn: Callable, op: str) -> Tensor:
    if any(p.requires_grad for p in parents):
        return Tensor(data, requires_grad=True, _parents=tuple(parents), _backward=backward_fn, _op=op)
    return Tensor(data, _op=op)


def _broadcast_shape(op: str, a: Tensor, b: Tensor) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(op, a.shape, b.shape) from None


# ---------------------------------------------------------------------------
# elementwise binary
# ---------------------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("add", a, b)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(a.data + b.data, (a, b), bw, "add")


def subtract(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("subtract", a, b)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _make(a.data - b.data, (a, b), bw, "subtract")


def multiply(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("multiply", a, b)

    def bw(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _make(a.data * b.data, (a, b), bw, "multiply")


def divide(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("divide", a, b)
    out = a.data / b.data

    def bw(g):
        gb = g / b.data
        return _unbroadcast(gb, a.shape), _unbroadcast(-gb * out, b.shape)

    return _make(out, (a, b), bw, "divide")


def negative(a) -> Tensor:
    a = as_tensor(a)
    return _make(-a.data, (a,), lambda g: (-g,), "negative")


def maximum(a, b) -> Tensor:
    """Elementwise max; ties send the gradient to ``a``."""
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("maximum", a, b)
    pick_a = a.data >= b.data

    def bw(g):
        return _unbroadcast(np.where(pick_a, g, 0.0), a.shape), _unbroadcast(np.where(pick_a, 0.0, g), b.shape)

    return _make(np.where(pick_a, a.data, b.data), (a, b), bw, "maximum")


def where(cond, a, b) -> Tensor:
    cond = np.asarray(cond, dtype=bool)
    a, b = as_tensor(a), as_tensor(b)
    try:
        np.broadcast_shapes(cond.shape, a.shape, b.shape)
    except ValueError:
        raise ShapeError("where", cond.shape, a.shape, b.shape) from None

    def bw(g):
        return _unbroadcast(np.where(cond, g, 0.0), a.shape), _unbroadcast(np.where(cond, 0.0, g), b.shape)

    return _make(np.where(cond, a.data, b.data), (a, b), bw, "where")


# ---------------------------------------------------------------------------
# elementwise unary
# ---------------------------------------------------------------------------

def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,), "exp")


def log(a) -> Tensor:
    a = as_tensor(a)
    if np.any(a.data < 0):
        raise DomainError(f"log: negative input (min {a.data.min():.6g})")
    with np.errstate(divide="ignore"):
        out = np.log(a.data)
    return _make(out, (a,), lambda g: (g / a.data,), "log")


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    if np.any(a.data < 0):
        raise DomainError(f"sqrt: negative input (min {a.data.min():.6g})")
    out = np.sqrt(a.data)
    return _make(out, (a,), lambda g: (g * 0.5 / out,), "sqrt")


def square(a) -> Tensor:
    a = as_tensor(a)
    return _make(a.data * a.data, (a,), lambda g: (2.0 * g * a.data,), "square")


def power(a, exponent: float) -> Tensor:
    a = as_tensor(a)
    out = a.data**exponent
    return _make(out, (a,), lambda g: (g * exponent * a.data ** (exponent - 1),), "power")


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    out = _np_sigmoid(a.data)
    return _make(out, (a,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def log_sigmoid(a) -> Tensor:
    """log(sigmoid(a)) without overflow for large |a|."""
    a = as_tensor(a)
    out = -np.logaddexp(0.0, -a.data)
    return _make(out, (a,), lambda g: (g * _np_sigmoid(-a.data),), "log_sigmoid")


def softplus(a) -> Tensor:
    a = as_tensor(a)
    out = np.logaddexp(0.0, a.data)
    return _make(out, (a,), lambda g: (g * _np_sigmoid(a.data),), "softplus")


def tanh(a) -> Tensor:
    a = as_tensor(a)
    out = np.tanh(a.data)
    return _make(out, (a,), lambda g: (g * (1.0 - out * out),), "tanh")


def sin(a) -> Tensor:
    a = as_tensor(a)
    return _make(np.sin(a.data), (a,), lambda g: (g * np.cos(a.data),), "sin")


def cos(a) -> Tensor:
    a = as_tensor(a)
    return _make(np.cos(a.data), (a,), lambda g: (-g * np.sin(a.data),), "cos")


def clamp(a, lo: float | None = None, hi: float | None = None) -> Tensor:
    """Clip to ``[lo, hi]``; the gradient is zero where clipping is active."""
    a = as_tensor(a)
    lo_v = -np.inf if lo is None else lo
    hi_v = np.inf if hi is None else hi
    out = np.clip(a.data, lo_v, hi_v)
    inside = (a.data >= lo_v) & (a.data <= hi_v)
    return _make(out, (a,), lambda g: (np.where(inside, g, 0.0),), "clamp")


def _np_sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x, dtype=np.float64)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


# ---------------------------------------------------------------------------
# reductions and axis-wise ops
# ---------------------------------------------------------------------------

def _expand_reduced(g: np.ndarray, shape, axis, keepdims: bool) -> np.ndarray:
    if axis is None:
        return np.broadcast_to(np.reshape(g, (1,) * len(shape)), shape)
    if not keepdims:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        axes = tuple(ax % len(shape) for ax in axes)
        g = np.expand_dims(g, axes)
    return np.broadcast_to(g, shape)


def sum_(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)
    return _make(out, (a,), lambda g: (_expand_reduced(g, a.shape, axis, keepdims),), "sum")


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    out = a.data.mean(axis=axis, keepdims=keepdims)
    count = a.data.size // max(out.size, 1) if a.data.size else 1

    def bw(g):
        return (_expand_reduced(g, a.shape, axis, keepdims) / count,)

    return _make(out, (a,), bw, "mean")


def logsumexp(a, axis: int = -1, keepdims: bool = False) -> Tensor:
    """Stable log(sum(exp(a))) along ``axis``; all -inf rows give -inf."""
    a = as_tensor(a)
    m = np.max(a.data, axis=axis, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    with np.errstate(divide="ignore"):
        out_k = m + np.log(np.sum(np.exp(a.data - m), axis=axis, keepdims=True))
    out = out_k if keepdims else np.squeeze(out_k, axis=axis)

    def bw(g):
        gk = g if keepdims else np.expand_dims(g, axis)
        with np.errstate(invalid="ignore"):
            w = np.exp(a.data - out_k)
        w = np.where(np.isfinite(w), w, 0.0)
        return (gk * w,)

    return _make(out, (a,), bw, "logsumexp")


def softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    m = np.max(a.data, axis=axis, keepdims=True)
    e = np.exp(a.data - m)
    out = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (out * (g - np.sum(g * out, axis=axis, keepdims=True)),)

    return _make(out, (a,), bw, "softmax")


# ---------------------------------------------------------------------------
# shape manipulation
# ---------------------------------------------------------------------------

def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError("reshape", a.shape, tuple(np.atleast_1d(shape))) from None
    return _make(out, (a,), lambda g: (g.reshape(a.shape),), "reshape")


def broadcast_to(a, shape) -> Tensor:
    a = as_tensor(a)
    try:
        out = np.broadcast_to(a.data, shape)
    except ValueError:
        raise ShapeError("broadcast_to", a.shape, tuple(shape)) from None
    return _make(out, (a,), lambda g: (_unbroadcast(g, a.shape),), "broadcast_to")


def transpose(a, axes=None) -> Tensor:
    a = as_tensor(a)
    out = np.transpose(a.data, axes)
    inv = None if axes is None else np.argsort(axes)
    return _make(out, (a,), lambda g: (np.transpose(g, inv),), "transpose")


def expand_dims(a, axis) -> Tensor:
    a = as_tensor(a)
    return reshape(a, np.expand_dims(a.data, axis).shape)


def getitem(a, index) -> Tensor:
    """Basic or advanced indexing; repeated indices accumulate on backward."""
    a = as_tensor(a)
    out = a.data[index]

    basic = _is_basic_index(index)

    def bw(g):
        full = np.zeros(a.shape)
        if basic:
            # basic indexing never repeats an element, so plain assignment is exact
            full[index] = g
        else:
            np.add.at(full, index, g)
        return (full,)

    return _make(np.array(out), (a,), bw, "getitem")


def _is_basic_index(index) -> bool:
    items = index if isinstance(index, tuple) else (index,)
    return all(isinstance(i, (int, np.integer, slice)) or i is None or i is Ellipsis for i in items)


def gather(a, indices, axis: int = 0) -> Tensor:
    """``np.take`` along ``axis`` with scatter-add backward."""
    a = as_tensor(a)
    indices = np.asarray(indices)
    if indices.size and (indices.min() < -a.shape[axis] or indices.max() >= a.shape[axis]):
        raise ShapeError("gather", a.shape, indices.shape)
    out = np.take(a.data, indices, axis=axis)

    def bw(g):
        full = np.zeros(a.shape)
        moved = np.moveaxis(full, axis, 0)
        g_moved = np.moveaxis(g, list(range(axis, axis + indices.ndim)), list(range(indices.ndim)))
        np.add.at(moved, indices, g_moved)
        return (full,)

    return _make(out, (a,), bw, "gather")


def stack(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    shapes = {t.shape for t in ts}
    if len(shapes) != 1:
        raise ShapeError("stack", *[t.shape for t in ts])
    out = np.stack([t.data for t in ts], axis=axis)

    def bw(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(ts)))

    return _make(out, ts, bw, "stack")


def concatenate(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in ts], axis=axis)
    except ValueError:
        raise ShapeError("concatenate", *[t.shape for t in ts]) from None
    splits = np.cumsum([t.shape[axis] for t in ts])[:-1]

    def bw(g):
        return tuple(np.split(g, splits, axis=axis))

    return _make(out, ts, bw, "concatenate")


# ---------------------------------------------------------------------------
# linear algebra
# ---------------------------------------------------------------------------

def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 1 or b.ndim < 1:
        raise ShapeError("matmul", a.shape, b.shape)
    try:
        out = np.matmul(a.data, b.data)
    except ValueError:
        raise ShapeError("matmul", a.shape, b.shape) from None

    def bw(g):
        ad, bd, gg = a.data, b.data, g
        if ad.ndim == 1:
            ad = ad[None, :]
            gg = np.expand_dims(gg, -2)
        if bd.ndim == 1:
            bd = bd[:, None]
            gg = np.expand_dims(gg, -1)
        ga = gg @ np.swapaxes(bd, -1, -2)
        gb = np.swapaxes(ad, -1, -2) @ gg
        if a.ndim == 1:
            ga = ga[..., 0, :]
        if b.ndim == 1:
            gb = gb[..., :, 0]
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _make(out, (a, b), bw, "matmul")


# ---------------------------------------------------------------------------
# bilinear grid sampling
# ---------------------------------------------------------------------------

def grid_sample(source, u, v) -> Tensor:
    """Bilinearly sample ``source`` at fractional pixel coordinates.

    ``source`` has shape ``(..., K, h, w)``: K channels sampled together.
    ``u`` (column) and ``v`` (row) share a shape ``(..., H, W)`` whose
    leading dims broadcast against ``source``'s leading dims.  The output
    has shape ``(..., K, H, W)``.  Reads outside the source are zero.
    """
    source, u, v = as_tensor(source), as_tensor(u), as_tensor(v)
    if u.shape != v.shape or source.ndim < 3 or u.ndim < 2:
        raise ShapeError("grid_sample", source.shape, u.shape, v.shape)
    h, w = source.shape[-2:]
    K = source.shape[-3]
    lead_s = source.shape[:-3]
    lead_u = u.shape[:-2]
    grid = u.shape[-2:]
    try:
        lead = np.broadcast_shapes(lead_s, lead_u)
    except ValueError:
        raise ShapeError("grid_sample", source.shape, u.shape) from None

    if K == 0 or 0 in lead or 0 in grid:
        return Tensor(np.zeros(lead + (K,) + grid))
    # row r of the flattened lead dims reads source row src_rows[r] (no copies of source)
    src_rows = np.broadcast_to(np.arange(int(np.prod(lead_s))).reshape(lead_s), lead).reshape(-1)
    n = src_rows.size
    n_src = int(np.prod(lead_s))
    table = np.ascontiguousarray(np.moveaxis(source.data.reshape(n_src, K, h * w), 1, 2)).reshape(-1, K)
    uu = np.broadcast_to(u.data, lead + grid).reshape(n, -1)
    vv = np.broadcast_to(v.data, lead + grid).reshape(n, -1)
    m = uu.shape[1]

    # only points with at least one corner inside the source can be non-zero
    # (and have non-zero gradients), so everything else is skipped
    live = (uu > -1.0) & (uu < w) & (vv > -1.0) & (vv < h)
    rows, cols = np.nonzero(live)
    pu, pv = uu[rows, cols], vv[rows, cols]
    x0 = np.floor(pu)
    y0 = np.floor(pv)
    fx = pu - x0
    fy = pv - y0
    x0 = x0.astype(np.int64)
    y0 = y0.astype(np.int64)
    base = src_rows[rows] * (h * w)
    corners = []
    vals = []
    acc = np.zeros((rows.size, K))
    for dy, dx, wgt in ((0, 0, (1 - fx) * (1 - fy)), (0, 1, fx * (1 - fy)), (1, 0, (1 - fx) * fy), (1, 1, fx * fy)):
        xi, yi = x0 + dx, y0 + dy
        valid = (xi >= 0) & (xi < w) & (yi >= 0) & (yi < h)
        idx = base + np.where(valid, yi * w + xi, 0)
        val = np.take(table, idx, axis=0) * valid[:, None]
        corners.append((idx, valid, wgt))
        vals.append(val)
        acc += wgt[:, None] * val
    out = np.zeros((n, K, m))
    out[rows, :, cols] = acc
    out_shape = lead + (K,) + grid

    def bw(g):
        gg = g.reshape(n, K, m)[rows, :, cols]  # (points, K)
        grads = []
        if source.requires_grad:
            gsrc = np.zeros((n_src * h * w, K))
            for idx, valid, wgt in corners:
                contrib = gg * (wgt * valid)[:, None]
                for k in range(K):
                    gsrc[:, k] += np.bincount(idx, weights=contrib[:, k], minlength=n_src * h * w)
            grads.append(np.moveaxis(gsrc.reshape(n_src, h * w, K), 2, 1).reshape(source.shape))
        else:
            grads.append(None)
        v00, v01, v10, v11 = vals
        du = (v01 - v00) * (1 - fy)[:, None] + (v11 - v10) * fy[:, None]
        dv = (v10 - v00) * (1 - fx)[:, None] + (v11 - v01) * fx[:, None]
        gu = np.zeros((n, m))
        gv = np.zeros((n, m))
        gu[rows, cols] = (gg * du).sum(axis=1)
        gv[rows, cols] = (gg * dv).sum(axis=1)
        grads.append(_unbroadcast(gu.reshape(lead + grid), u.shape))
        grads.append(_unbroadcast(gv.reshape(lead + grid), v.shape))
        return tuple(grads)

    return _make(out.reshape(out_shape), (source, u, v), bw, "grid_sample")


# ---------------------------------------------------------------------------
# backward pass
# ---------------------------------------------------------------------------

def topological_tape(root: Tensor) -> list[Tensor]:
    """Nodes reachable from ``root`` that require grad, inputs before consumers."""
    order: list[Tensor] = []
    seen: set[int] = set()
    stack_ = [(root, False)]
    while stack_:
        node, expanded = stack_.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen or not node.requires_grad:
            continue
        seen.add(id(node))
        stack_.append((node, True))
        for p in node._parents:
            if id(p) not in seen and p.requires_grad:
                stack_.append((p, False))
    return order


def backward(root: Tensor, grad=None) -> dict[int, np.ndarray]:
    """Accumulate d(root)/d(leaf) into ``leaf.grad`` for every reachable leaf.

    Returns a map from ``id(leaf)`` to its gradient for this call.
    """
    if grad is None:
        if root.data.size != 1:
            raise ShapeError("backward (root must be scalar)", root.shape)
        grad = np.ones_like(root.data)
    if not root.requires_grad:
        return {}
    tape = topological_tape(root)
    cot: dict[int, np.ndarray] = {id(root): np.asarray(grad, dtype=np.float64)}
    leaves: dict[int, np.ndarray] = {}
    for node in reversed(tape):
        g = cot.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            leaves[id(node)] = g
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            cot[key] = pg if key not in cot else cot[key] + pg
    return leaves


def grad(f: Callable[..., Tensor], *args: np.ndarray) -> list[np.ndarray]:
    """Gradient of scalar ``f`` with respect to each positional array."""
    leaves = [parameter(a) for a in args]
    out = f(*leaves)
    backward(out)
    return [np.zeros(l.shape) if l.grad is None else l.grad for l in leaves]


def finite_difference_check(f: Callable[[Tensor], Tensor], x, eps: float = 1e-5) -> float:
    """Max over coordinates of |analytic - central difference| / max(1, |analytic|)."""
    if eps <= 0:
        raise ValueError("eps must be positive")
    x = np.array(np.asarray(x.data if isinstance(x, Tensor) else x, dtype=np.float64))
    (analytic,) = grad(f, x)
    flat = x.reshape(-1)
    numeric = np.zeros(flat.size)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        fp = f(Tensor(x)).item()
        flat[i] = orig - eps
        fm = f(Tensor(x)).item()
        flat[i] = orig
        if not (math.isfinite(fp) and math.isfinite(fm)):
            raise FloatingPointError(f"non-finite function value near coordinate {i}")
        numeric[i] = (fp - fm) / (2 * eps)
    a = analytic.reshape(-1)
    if not np.all(np.isfinite(a)):
        raise FloatingPointError("non-finite analytic gradient")
    if a.size == 0:
        return 0.0
    return float(np.max(np.abs(a - numeric) / np.maximum(1.0, np.abs(a))))
