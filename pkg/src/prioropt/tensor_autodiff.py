"""Small reverse-mode autodiff over numpy arrays.

Operations record onto the active :class:`Tape` whenever one of their inputs
is tracked (a leaf with ``requires_grad`` or a previously recorded node).
Without an active tape every op is a thin numpy wrapper, which is the fast
path used for marching rays and extracting meshes.

Spatial gradients of a field are computed in forward mode with :class:`Dual`
numbers whose tangents are themselves ordinary tape tensors, so the result
can be differentiated again with respect to network parameters.
"""

from __future__ import annotations

import itertools
from typing import Callable, Sequence

import numpy as np

_DEFAULT_DTYPE = np.float64
_TAPES: list["Tape"] = []
_ids = itertools.count()

LAYER_NORM_EPS = 1e-5


class ShapeError(ValueError):
    """Operand shapes do not conform for a primitive."""


def set_default_dtype(dtype) -> None:
    global _DEFAULT_DTYPE
    dtype = np.dtype(dtype).type
    if dtype not in (np.float32, np.float64):
        raise ValueError(f"unsupported dtype {dtype}")
    _DEFAULT_DTYPE = dtype


def get_default_dtype():
    return _DEFAULT_DTYPE


_RELEASED = -2


class Tape:
    """Ordered record of primitive operations.

    Nodes are appended at creation time, so the list is already in
    topological order and a reverse walk visits each node once.
    """

    def __init__(self):
        self.nodes: list[Tensor] = []

    def __enter__(self) -> "Tape":
        _TAPES.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _TAPES.remove(self)
        # nodes point back at the tape; break the cycle so activations are
        # freed by refcounting instead of waiting for the cyclic collector
        for n in self.nodes:
            n._parents, n._vjp, n._tape, n._index = (), None, None, _RELEASED
        self.nodes = []

    def __len__(self) -> int:
        return len(self.nodes)


class no_grad:
    """Suspend recording; ops inside behave as plain numpy."""

    def __enter__(self):
        _TAPES.append(None)
        return self

    def __exit__(self, *exc) -> None:
        _TAPES.pop()


def active_tape() -> Tape | None:
    return _TAPES[-1] if _TAPES else None


class Tensor:
    __slots__ = ("data", "requires_grad", "id", "_parents", "_vjp", "_tape", "_index")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(_DEFAULT_DTYPE)
        self.data = arr
        self.requires_grad = requires_grad
        self.id = next(_ids)
        self._parents: tuple = ()
        self._vjp = None
        self._tape: Tape | None = None
        self._index = -1

    @property
    def tracked(self) -> bool:
        return self.requires_grad or self._tape is not None

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def __len__(self) -> int:
        return len(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, tracked={self.tracked})"

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    # operator sugar
    def __add__(self, o): return add(self, o)
    def __radd__(self, o): return add(o, self)
    def __sub__(self, o): return sub(self, o)
    def __rsub__(self, o): return sub(o, self)
    def __mul__(self, o): return mul(self, o)
    def __rmul__(self, o): return mul(o, self)
    def __truediv__(self, o): return div(self, o)
    def __rtruediv__(self, o): return div(o, self)
    def __neg__(self): return neg(self)
    def __pow__(self, k): return power(self, k)
    def __matmul__(self, o): return matmul(self, o)
    def __getitem__(self, idx): return getitem(self, idx)

    def sum(self, axis=None, keepdims=False): return tsum(self, axis, keepdims)
    def mean(self, axis=None, keepdims=False): return mean(self, axis, keepdims)
    def reshape(self, *shape): return reshape(self, shape[0] if len(shape) == 1 and isinstance(shape[0], tuple) else shape)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=_DEFAULT_DTYPE))


def _node(data, parents: tuple, vjp) -> Tensor:
    out = Tensor(data)
    tape = active_tape()
    if tape is not None and any(p.tracked for p in parents):
        out._parents = parents
        out._vjp = vjp
        out._tape = tape
        out._index = len(tape.nodes)
        tape.nodes.append(out)
    return out


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _broadcast_check(name: str, a: Tensor, b: Tensor) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{name}: shapes {a.shape} and {b.shape} do not conform") from None


# ---------------------------------------------------------------- binary ops

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_check("add", a, b)
    return _node(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_check("sub", a, b)
    return _node(a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_check("mul", a, b)
    return _node(a.data * b.data, (a, b),
                 lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_check("div", a, b)
    out = a.data / b.data
    return _node(out, (a, b),
                 lambda g: (_unbroadcast(g / b.data, a.shape),
                            _unbroadcast(-g * out / b.data, b.shape)))


def maximum(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_check("maximum", a, b)
    pick = a.data >= b.data
    return _node(np.where(pick, a.data, b.data), (a, b),
                 lambda g: (_unbroadcast(g * pick, a.shape), _unbroadcast(g * ~pick, b.shape)))


def minimum(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_check("minimum", a, b)
    pick = a.data <= b.data
    return _node(np.where(pick, a.data, b.data), (a, b),
                 lambda g: (_unbroadcast(g * pick, a.shape), _unbroadcast(g * ~pick, b.shape)))


def where(cond, a, b) -> Tensor:
    cond = np.asarray(cond.data if isinstance(cond, Tensor) else cond, dtype=bool)
    a, b = as_tensor(a), as_tensor(b)
    return _node(np.where(cond, a.data, b.data), (a, b),
                 lambda g: (_unbroadcast(g * cond, a.shape), _unbroadcast(g * ~cond, b.shape)))


def matmul(a, b) -> Tensor:
    """Matrix product with numpy batch broadcasting; 1-D operands are promoted."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim == 0 or b.ndim == 0:
        raise ShapeError(f"matmul: scalar operand, shapes {a.shape} and {b.shape}")
    if a.ndim == 1:
        return reshape(matmul(reshape(a, (1,) + a.shape), b), b.shape[:-2] + b.shape[-1:])
    if b.ndim == 1:
        return reshape(matmul(a, reshape(b, b.shape + (1,))), a.shape[:-1])
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: shapes {a.shape} and {b.shape} do not conform")
    try:
        out = np.matmul(a.data, b.data)
    except ValueError:
        raise ShapeError(f"matmul: shapes {a.shape} and {b.shape} do not conform") from None

    def vjp(g):
        ga = gb = None
        if a.tracked:
            ga = _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape)
        if b.tracked:
            gb = _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape)
        return ga, gb

    return _node(out, (a, b), vjp)


# ----------------------------------------------------------------- unary ops

def neg(a) -> Tensor:
    a = as_tensor(a)
    return _node(-a.data, (a,), lambda g: (-g,))


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0
    return _node(a.data * mask, (a,), lambda g: (g * mask,))


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    out = 0.5 * (1.0 + np.tanh(0.5 * a.data))
    return _node(out, (a,), lambda g: (g * out * (1.0 - out),))


def tanh(a) -> Tensor:
    a = as_tensor(a)
    out = np.tanh(a.data)
    return _node(out, (a,), lambda g: (g * (1.0 - out * out),))


def sin(a) -> Tensor:
    a = as_tensor(a)
    return _node(np.sin(a.data), (a,), lambda g: (g * np.cos(a.data),))


def cos(a) -> Tensor:
    a = as_tensor(a)
    return _node(np.cos(a.data), (a,), lambda g: (-g * np.sin(a.data),))


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return _node(out, (a,), lambda g: (g * out,))


def log(a) -> Tensor:
    a = as_tensor(a)
    return _node(np.log(a.data), (a,), lambda g: (g / a.data,))


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    out = np.sqrt(a.data)
    # zero subgradient at 0 keeps norms of vanishing vectors finite
    pos = out > 0
    return _node(out, (a,), lambda g: (np.where(pos, g * 0.5 / np.where(pos, out, 1.0), 0.0),))


def tabs(a) -> Tensor:
    a = as_tensor(a)
    return _node(np.abs(a.data), (a,), lambda g: (g * np.sign(a.data),))


def power(a, k: float) -> Tensor:
    a = as_tensor(a)
    return _node(a.data ** k, (a,), lambda g: (g * k * a.data ** (k - 1),))


def clamp(a, lo=None, hi=None) -> Tensor:
    a = as_tensor(a)
    out = np.clip(a.data, lo, hi)
    inside = np.ones(a.shape, dtype=bool)
    if lo is not None:
        inside &= a.data >= lo
    if hi is not None:
        inside &= a.data <= hi
    return _node(out, (a,), lambda g: (g * inside,))


# ---------------------------------------------------------------- reductions

def tsum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape),)

    return _node(out, (a,), vjp)


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    count = a.data.size if axis is None else np.prod([a.shape[ax] for ax in np.atleast_1d(axis)])
    return tsum(a, axis, keepdims) * (1.0 / count)


def l1_norm(a, axis=None) -> Tensor:
    return tsum(tabs(a), axis)


def l2_norm(a, axis=None, keepdims: bool = False) -> Tensor:
    return sqrt(tsum(a * a, axis, keepdims))


def layer_norm(x, gain=None, bias=None, eps: float = LAYER_NORM_EPS) -> Tensor:
    """Normalize over the last axis, then scale and shift."""
    x = as_tensor(x)
    centered = x - mean(x, axis=-1, keepdims=True)
    var = mean(centered * centered, axis=-1, keepdims=True)
    out = centered / sqrt(var + eps)
    if gain is not None:
        out = out * gain
    if bias is not None:
        out = out + bias
    return out


# ------------------------------------------------------------ shape plumbing

def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot view {a.shape} as {shape}") from None
    return _node(out, (a,), lambda g: (g.reshape(a.shape),))


def swapaxes(a, ax1: int, ax2: int) -> Tensor:
    a = as_tensor(a)
    return _node(np.swapaxes(a.data, ax1, ax2), (a,), lambda g: (np.swapaxes(g, ax1, ax2),))


def moveaxis(a, src: int, dst: int) -> Tensor:
    a = as_tensor(a)
    return _node(np.moveaxis(a.data, src, dst), (a,), lambda g: (np.moveaxis(g, dst, src),))


def broadcast_to(a, shape) -> Tensor:
    a = as_tensor(a)
    return _node(np.broadcast_to(a.data, shape), (a,), lambda g: (_unbroadcast(g, a.shape),))


def getitem(a, idx) -> Tensor:
    a = as_tensor(a)
    if isinstance(idx, Tensor):
        idx = idx.data

    def vjp(g):
        out = np.zeros(a.shape, dtype=g.dtype)
        np.add.at(out, idx, g) if _fancy(idx) else out.__setitem__(idx, g)
        return (out,)

    return _node(a.data[idx], (a,), vjp)


def _fancy(idx) -> bool:
    items = idx if isinstance(idx, tuple) else (idx,)
    return any(isinstance(i, (list, np.ndarray)) for i in items)


def index_select(a, index, axis: int = 0) -> Tensor:
    a = as_tensor(a)
    index = np.asarray(index, dtype=np.intp)
    ax = axis % a.ndim

    def vjp(g):
        out = np.zeros(a.shape, dtype=g.dtype)
        np.add.at(out, (slice(None),) * ax + (index,), g)
        return (out,)

    return _node(np.take(a.data, index, axis=ax), (a,), vjp)


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in ts], axis=axis)
    except ValueError:
        raise ShapeError("concat: shapes " + ", ".join(str(t.shape) for t in ts) + " do not conform") from None
    splits = np.cumsum([t.shape[axis] for t in ts])[:-1]
    return _node(out, tuple(ts), lambda g: tuple(np.split(g, splits, axis=axis)))


def stack(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    expanded = [reshape(t, t.shape[:axis % (t.ndim + 1)] + (1,) + t.shape[axis % (t.ndim + 1):]) for t in ts]
    return concat(expanded, axis=axis)


# ------------------------------------------------------------------ backward

def backward(loss: Tensor, wrt: Sequence[Tensor]) -> list[np.ndarray]:
    """Gradients of a scalar ``loss`` with respect to each tensor in ``wrt``.

    Tensors the loss does not depend on get zero arrays.
    """
    if loss.data.size != 1:
        raise ValueError(f"backward: loss must be scalar, got shape {loss.shape}")
    if loss._index == _RELEASED:
        raise RuntimeError("backward: the loss was recorded on a tape that has already exited")
    wrt_ids = {t.id for t in wrt}
    grads: dict[int, np.ndarray] = {loss.id: np.ones_like(loss.data)}
    kept: dict[int, np.ndarray] = {}
    if loss._tape is not None:
        for node in reversed(loss._tape.nodes[: loss._index + 1]):
            g = grads.pop(node.id, None)
            if g is None:
                continue
            if node.id in wrt_ids:
                kept[node.id] = g
            for parent, pg in zip(node._parents, node._vjp(g)):
                if pg is None or not parent.tracked:
                    continue
                prev = grads.get(parent.id)
                grads[parent.id] = pg if prev is None else prev + pg
    grads.update(kept)
    out = []
    for t in wrt:
        g = grads.get(t.id)
        out.append(np.zeros_like(t.data) if g is None else np.asarray(g, dtype=t.dtype).reshape(t.shape))
    return out


def value_and_grad(fn: Callable[..., Tensor], *arrays: np.ndarray):
    """Evaluate ``fn`` on fresh leaves built from ``arrays`` and return (value, grads)."""
    with Tape():
        leaves = [Tensor(a, requires_grad=True) for a in arrays]
        loss = fn(*leaves)
        grads = backward(loss, leaves)
    return float(loss.data), grads


# --------------------------------------------------------------- forward mode

class Dual:
    """A primal tensor with an optional stack of tangents.

    ``tangent`` has shape ``(k,) + primal.shape``: one directional derivative
    per leading index. ``tangent=None`` means zero tangent (constant), which
    keeps plain evaluation as cheap as the primal alone.
    """

    __slots__ = ("primal", "tangent")

    def __init__(self, primal, tangent=None):
        self.primal = as_tensor(primal)
        self.tangent = tangent

    @property
    def shape(self):
        return self.primal.shape

    def __add__(self, o): return _dadd(self, o, 1.0)
    def __radd__(self, o): return _dadd(self, o, 1.0)
    def __sub__(self, o): return _dadd(self, o, -1.0)
    def __rsub__(self, o): return _dadd(-self, o, 1.0)
    def __neg__(self): return Dual(neg(self.primal), None if self.tangent is None else neg(self.tangent))

    def __mul__(self, o):
        o = lift(o)
        return Dual(self.primal * o.primal,
                    _tsum(_tscale(self.tangent, o.primal), _tscale(o.tangent, self.primal)))

    __rmul__ = __mul__

    def __truediv__(self, o):
        o = lift(o)
        inv = 1.0 / o.primal
        out = self.primal * inv
        t = _tsum(_tscale(self.tangent, inv), _tscale(o.tangent, neg(out * inv)))
        return Dual(out, t)

    def __getitem__(self, idx):
        t = None
        if self.tangent is not None:
            full = idx if isinstance(idx, tuple) else (idx,)
            t = getitem(self.tangent, (slice(None),) + full)
        return Dual(getitem(self.primal, idx), t)

    def __matmul__(self, w):
        w = as_tensor(w)
        return Dual(matmul(self.primal, w), None if self.tangent is None else matmul(self.tangent, w))


def lift(x) -> Dual:
    return x if isinstance(x, Dual) else Dual(as_tensor(x))


def _align(t: Tensor, ndim: int) -> Tensor:
    """Insert axes after the tangent axis so ``t`` broadcasts against an ndim-array."""
    missing = ndim - (t.ndim - 1)
    if missing <= 0:
        return t
    return reshape(t, t.shape[:1] + (1,) * missing + t.shape[1:])


def _tscale(t, s):
    if t is None:
        return None
    return _align(t, s.ndim) * s


def _tsum(a, b):
    if a is None:
        return b
    if b is None:
        return a
    return a + b


def _dadd(a: Dual, o, sign: float) -> Dual:
    o = lift(o)
    prim = a.primal + o.primal if sign > 0 else a.primal - o.primal
    ot = o.tangent if (o.tangent is None or sign > 0) else neg(o.tangent)
    if a.tangent is not None and ot is not None:
        nd = prim.ndim
        t = _align(a.tangent, nd) + _align(ot, nd)
    else:
        t = a.tangent if ot is None else ot
    if t is not None and t.shape[1:] != prim.shape:
        t = broadcast_to(t, (t.shape[0],) + prim.shape)
    return Dual(prim, t)


def _unary(x: Dual, fn, dfn) -> Dual:
    """Apply ``fn`` to the primal and chain ``dfn(primal)`` into the tangent."""
    out = fn(x.primal)
    return Dual(out, None if x.tangent is None else x.tangent * dfn(x.primal, out))


def d_relu(x: Dual) -> Dual:
    return _unary(x, relu, lambda p, o: Tensor((p.data > 0).astype(p.dtype)))


def d_sin(x: Dual) -> Dual:
    return _unary(x, sin, lambda p, o: cos(p))


def d_cos(x: Dual) -> Dual:
    return _unary(x, cos, lambda p, o: neg(sin(p)))


def d_sqrt(x: Dual) -> Dual:
    def dfn(p, o):
        pos = o.data > 0
        return where(pos, 0.5 / where(pos, o, 1.0), 0.0)
    return _unary(x, sqrt, dfn)


def d_abs(x: Dual) -> Dual:
    return _unary(x, tabs, lambda p, o: Tensor(np.sign(p.data)))


def d_power(x: Dual, k: float) -> Dual:
    return _unary(x, lambda p: power(p, k), lambda p, o: k * power(p, k - 1))


def d_sigmoid(x: Dual) -> Dual:
    return _unary(x, sigmoid, lambda p, o: o * (1.0 - o))


def d_exp(x: Dual) -> Dual:
    return _unary(x, exp, lambda p, o: o)


def d_log(x: Dual) -> Dual:
    return _unary(x, log, lambda p, o: 1.0 / p)


def d_clamp(x: Dual, lo=None, hi=None) -> Dual:
    def mask(p, o):
        m = np.ones(p.shape, dtype=bool)
        if lo is not None:
            m &= p.data >= lo
        if hi is not None:
            m &= p.data <= hi
        return Tensor(m.astype(p.dtype))
    return _unary(x, lambda p: clamp(p, lo, hi), mask)


def _select(a: Dual, b: Dual, pick: np.ndarray) -> Dual:
    prim = where(pick, a.primal, b.primal)
    if a.tangent is None and b.tangent is None:
        return Dual(prim)
    k = (a.tangent if a.tangent is not None else b.tangent).shape[0]
    zero = Tensor(np.zeros((k,) + prim.shape, dtype=prim.dtype))
    ta = zero if a.tangent is None else _align(a.tangent, prim.ndim)
    tb = zero if b.tangent is None else _align(b.tangent, prim.ndim)
    return Dual(prim, where(pick, ta, tb))


def d_maximum(a, b) -> Dual:
    a, b = lift(a), lift(b)
    return _select(a, b, a.primal.data >= b.primal.data)


def d_minimum(a, b) -> Dual:
    a, b = lift(a), lift(b)
    return _select(a, b, a.primal.data <= b.primal.data)


def d_sum(x: Dual, axis: int = -1) -> Dual:
    ax = axis % x.primal.ndim
    return Dual(tsum(x.primal, ax), None if x.tangent is None else tsum(x.tangent, ax + 1))


def d_norm(x: Dual, axis: int = -1) -> Dual:
    return d_sqrt(d_sum(x * x, axis))


def d_concat(xs: Sequence[Dual], axis: int = -1) -> Dual:
    xs = [lift(x) for x in xs]
    ax = axis % xs[0].primal.ndim
    prim = concat([x.primal for x in xs], ax)
    if all(x.tangent is None for x in xs):
        return Dual(prim)
    k = next(x.tangent.shape[0] for x in xs if x.tangent is not None)
    parts = []
    for x in xs:
        t = x.tangent
        if t is None:
            t = Tensor(np.zeros((k,) + x.shape, dtype=prim.dtype))
        elif t.shape[1:] != x.shape:
            t = broadcast_to(t, (k,) + x.shape)
        parts.append(t)
    return Dual(prim, concat(parts, ax + 1))


def seed_points(p) -> Dual:
    """Points ``(..., 3)`` carrying the three unit tangents e_x, e_y, e_z."""
    p = as_tensor(p)
    eye = np.eye(3, dtype=p.dtype).reshape((3,) + (1,) * (p.ndim - 1) + (3,))
    return Dual(p, Tensor(np.broadcast_to(eye, (3,) + p.shape).copy()))


def spatial_gradient(field: Callable[[Dual], Dual], p, mode: str = "analytic",
                     h: float | None = None) -> tuple[Tensor, Tensor]:
    """Value and spatial gradient ``(f(p), grad_p f(p))`` of a scalar field.

    ``field`` maps a :class:`Dual` of points ``(..., 3)`` to a Dual of shape
    ``(...)``. Both modes keep every evaluation on the tape, so the gradient
    is itself differentiable with respect to whatever parameters ``field``
    closes over.
    """
    p = as_tensor(p)
    if mode == "analytic":
        out = field(seed_points(p))
        if out.tangent is None:
            grad = Tensor(np.zeros(p.shape, dtype=out.primal.dtype))
        else:
            grad = moveaxis(out.tangent, 0, -1)
        return out.primal, grad
    if mode != "finite_diff":
        raise ValueError(f"unknown spatial gradient mode {mode!r}")
    if h is None:
        h = 1e-6 if p.dtype == np.float64 else 1e-4
    if h <= 0:
        raise ValueError(f"finite-difference step must be positive, got {h}")
    value = field(Dual(p)).primal
    cols = []
    for k in range(3):
        step = np.zeros(p.shape, dtype=p.dtype)
        step[..., k] = h
        fp = field(Dual(p + step)).primal
        fm = field(Dual(p - step)).primal
        cols.append((fp - fm) * (0.5 / h))
    return value, stack(cols, axis=-1)
