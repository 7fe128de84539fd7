"""Dense tensors with reverse-mode automatic differentiation on a tape.

numpy supplies the raw array kernels; everything gradient-related (the
tape, the vjp rules, masked-softmax semantics) is defined here. Ops never
mutate their inputs, and every op checks its output for NaN/Inf so a
non-finite value surfaces at the op that produced it, not three modules
later.

Gradients accumulate additively into ``.grad`` buffers during the single
reverse sweep of :func:`backward`. Leaves created with
``requires_grad=True`` get an eagerly allocated zero buffer, so a leaf
the loss never touched reads back an all-zero gradient rather than None.
"""

from __future__ import annotations

import numpy as np
from scipy.special import erf

DTYPES = {"f32": np.float32, "f64": np.float64}


class ShapeError(ValueError):
    """Operand shapes or dtypes incompatible for the requested op."""


class NonFiniteError(FloatingPointError):
    """An op produced NaN or Inf."""


class GraphError(RuntimeError):
    """Misuse of the recording tape (double backward, non-scalar loss, ...)."""


_GRAPH_STACK: list["Graph"] = []


class Graph:
    """Recording tape. Node order is forward execution order; backward
    walks it exactly once in reverse."""

    def __init__(self):
        self.nodes = []  # list of (out_tensor, vjp_closure)
        self.consumed = False

    def __enter__(self):
        _GRAPH_STACK.append(self)
        return self

    def __exit__(self, *exc):
        _GRAPH_STACK.pop()
        return False


def _active_graph():
    return _GRAPH_STACK[-1] if _GRAPH_STACK else None


class Tensor:
    """A dense float array plus the bookkeeping the tape needs."""

    __slots__ = ("data", "requires_grad", "grad", "_graph")

    def __init__(self, data, requires_grad=False, dtype=None):
        arr = np.asarray(data)
        if dtype is not None:
            arr = np.asarray(arr, dtype=DTYPES.get(dtype, dtype))
        elif arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float32)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = np.zeros_like(arr) if requires_grad else None
        self._graph = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    def item(self):
        return float(self.data)

    def numpy(self):
        return self.data

    def detach(self):
        return Tensor(self.data)

    def zero_grad(self):
        if self.grad is not None:
            self.grad[...] = 0

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype})"

    # operator sugar; all routing through the module-level ops
    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


def _t(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _check_finite(op, arr):
    if not np.isfinite(arr).all():
        raise NonFiniteError(f"{op} produced non-finite values")


def _tracked(t, g):
    return t.requires_grad or t._graph is g


def _record(op, out, parents, vjp):
    g = _active_graph()
    if g is None or g.consumed:
        return out
    if not any(_tracked(p, g) for p in parents):
        return out
    out._graph = g
    g.nodes.append((out, vjp))
    return out


def _live(t):
    return t.requires_grad or t._graph is not None


def _acc(t, g_arr):
    """Accumulate a gradient contribution into t's buffer."""
    if not _live(t):
        return
    if t.grad is None:
        t.grad = np.array(g_arr, dtype=t.data.dtype)
    else:
        t.grad += g_arr


def backward(loss):
    """Reverse sweep from a scalar loss through its recording graph."""
    if not isinstance(loss, Tensor) or loss.ndim != 0:
        shape = getattr(loss, "shape", None)
        raise GraphError(f"backward needs a scalar loss, got shape {shape}")
    g = loss._graph
    if g is None:
        raise GraphError("loss was not produced inside an active Graph")
    if g.consumed:
        raise GraphError("backward already ran on this graph; record a new Graph")
    loss.grad = np.ones_like(loss.data)
    for out, vjp in reversed(g.nodes):
        if out.grad is not None:
            vjp(out.grad)
    g.consumed = True


# ---------------------------------------------------------------------------
# broadcasting: only leading unit dims may broadcast (implicit alignment bugs
# surface as errors; anything fancier goes through the explicit expand op)

def _bcast_shape(op, sa, sb):
    r = max(len(sa), len(sb))
    pa = (1,) * (r - len(sa)) + tuple(sa)
    pb = (1,) * (r - len(sb)) + tuple(sb)
    out = []
    for x, y in zip(pa, pb):
        if x == y:
            out.append(x)
        elif x == 1 or y == 1:
            out.append(max(x, y))
        else:
            raise ShapeError(f"{op}: incompatible shapes {sa} and {sb}")
    out = tuple(out)
    for p in (pa, pb):
        seen_wide = False
        for d, o in zip(p, out):
            if d == 1 and o > 1:
                if seen_wide:
                    raise ShapeError(
                        f"{op}: only leading unit dims broadcast, got {sa} vs {sb}"
                    )
            elif d > 1:
                seen_wide = True
    return out


def _unbroadcast(g_arr, shape):
    extra = g_arr.ndim - len(shape)
    if extra:
        g_arr = g_arr.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, d in enumerate(shape) if d == 1 and g_arr.shape[i] > 1)
    if axes:
        g_arr = g_arr.sum(axis=axes, keepdims=True)
    return g_arr


def _same_dtype(op, a, b):
    if a.data.dtype != b.data.dtype:
        raise ShapeError(f"{op}: dtype mismatch {a.data.dtype} vs {b.data.dtype}")


# ---------------------------------------------------------------------------
# elementwise ops

def add(a, b):
    a, b = _t(a), _t(b)
    _same_dtype("add", a, b)
    _bcast_shape("add", a.shape, b.shape)
    out_d = a.data + b.data
    _check_finite("add", out_d)
    out = Tensor(out_d)

    def vjp(g):
        _acc(a, _unbroadcast(g, a.shape))
        _acc(b, _unbroadcast(g, b.shape))

    return _record("add", out, (a, b), vjp)


def sub(a, b):
    a, b = _t(a), _t(b)
    _same_dtype("sub", a, b)
    _bcast_shape("sub", a.shape, b.shape)
    out_d = a.data - b.data
    _check_finite("sub", out_d)
    out = Tensor(out_d)

    def vjp(g):
        _acc(a, _unbroadcast(g, a.shape))
        _acc(b, _unbroadcast(-g, b.shape))

    return _record("sub", out, (a, b), vjp)


def mul(a, b):
    a, b = _t(a), _t(b)
    _same_dtype("mul", a, b)
    _bcast_shape("mul", a.shape, b.shape)
    out_d = a.data * b.data
    _check_finite("mul", out_d)
    out = Tensor(out_d)

    def vjp(g):
        if _live(a):
            _acc(a, _unbroadcast(g * b.data, a.shape))
        if _live(b):
            _acc(b, _unbroadcast(g * a.data, b.shape))

    return _record("mul", out, (a, b), vjp)


def neg(x):
    x = _t(x)
    out = Tensor(-x.data)

    def vjp(g):
        _acc(x, -g)

    return _record("neg", out, (x,), vjp)


def scale(x, c):
    """Multiply by a python scalar constant."""
    x = _t(x)
    out_d = x.data * x.data.dtype.type(c)
    _check_finite("scale", out_d)
    out = Tensor(out_d)

    def vjp(g):
        _acc(x, g * x.data.dtype.type(c))

    return _record("scale", out, (x,), vjp)


def square(x):
    x = _t(x)
    out_d = x.data * x.data
    _check_finite("square", out_d)
    out = Tensor(out_d)

    def vjp(g):
        _acc(x, g * (2.0 * x.data))

    return _record("square", out, (x,), vjp)


def gelu(x):
    """Exact-erf gelu: x * Phi(x)."""
    x = _t(x)
    d = x.data
    phi_cdf = 0.5 * (1.0 + erf(d / np.sqrt(2.0)))
    out_d = (d * phi_cdf).astype(d.dtype)
    _check_finite("gelu", out_d)
    out = Tensor(out_d)

    def vjp(g):
        pdf = np.exp(-0.5 * d * d) / np.sqrt(2.0 * np.pi)
        _acc(x, (g * (phi_cdf + d * pdf)).astype(d.dtype))

    return _record("gelu", out, (x,), vjp)


def _sigmoid(d):
    # stable: never exponentiate a large positive argument
    pos = d >= 0
    z = np.empty_like(d)
    z[pos] = 1.0 / (1.0 + np.exp(-d[pos]))
    ez = np.exp(d[~pos])
    z[~pos] = ez / (1.0 + ez)
    return z


def silu(x):
    x = _t(x)
    d = x.data
    sig = _sigmoid(d)
    out_d = d * sig
    _check_finite("silu", out_d)
    out = Tensor(out_d)

    def vjp(g):
        _acc(x, g * (sig * (1.0 + d * (1.0 - sig))))

    return _record("silu", out, (x,), vjp)


# ---------------------------------------------------------------------------
# reductions

def _axis_tuple(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def t_sum(x, axis=None, keepdims=False):
    x = _t(x)
    out_d = x.data.sum(axis=axis, keepdims=keepdims)
    _check_finite("sum", out_d)
    out = Tensor(out_d)
    axes = _axis_tuple(axis, x.ndim)

    def vjp(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        _acc(x, np.broadcast_to(g, x.shape).copy())

    return _record("sum", out, (x,), vjp)


def t_mean(x, axis=None, keepdims=False):
    x = _t(x)
    out_d = x.data.mean(axis=axis, keepdims=keepdims)
    _check_finite("mean", out_d)
    out = Tensor(out_d)
    axes = _axis_tuple(axis, x.ndim)
    count = 1
    for a in axes:
        count *= x.shape[a]

    def vjp(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        _acc(x, np.broadcast_to(g / count, x.shape).astype(x.dtype))

    return _record("mean", out, (x,), vjp)


# ---------------------------------------------------------------------------
# matmul and shape ops

def matmul(a, b):
    a, b = _t(a), _t(b)
    _same_dtype("matmul", a, b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs ndim >= 2 operands, got {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dims disagree: {a.shape} @ {b.shape}")
    if a.ndim > 2 and b.ndim > 2 and a.shape[:-2] != b.shape[:-2]:
        raise ShapeError(f"matmul batch dims disagree: {a.shape} @ {b.shape}")
    out_d = np.matmul(a.data, b.data)
    _check_finite("matmul", out_d)
    out = Tensor(out_d)

    def vjp(g):
        if _live(a):
            ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
            if ga.ndim > a.ndim:
                ga = ga.sum(axis=tuple(range(ga.ndim - a.ndim)))
            _acc(a, ga)
        if _live(b):
            gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
            if gb.ndim > b.ndim:
                gb = gb.sum(axis=tuple(range(gb.ndim - b.ndim)))
            _acc(b, gb)

    return _record("matmul", out, (a, b), vjp)


def reshape(x, shape):
    x = _t(x)
    out = Tensor(x.data.reshape(shape))

    def vjp(g):
        _acc(x, g.reshape(x.shape))

    return _record("reshape", out, (x,), vjp)


def transpose(x, axes):
    x = _t(x)
    out = Tensor(np.transpose(x.data, axes))
    inv = np.argsort(axes)

    def vjp(g):
        _acc(x, np.transpose(g, inv))

    return _record("transpose", out, (x,), vjp)


def expand(x, shape):
    """Explicit broadcast of unit dims anywhere (gradient sums them back)."""
    x = _t(x)
    shape = tuple(shape)
    if len(shape) < x.ndim:
        raise ShapeError(f"expand target {shape} has lower rank than {x.shape}")
    pad = len(shape) - x.ndim
    padded = (1,) * pad + x.shape
    for d, o in zip(padded, shape):
        if d != o and d != 1:
            raise ShapeError(f"expand: cannot expand {x.shape} to {shape}")
    out = Tensor(np.broadcast_to(x.data, shape))
    axes = tuple(i for i, (d, o) in enumerate(zip(padded, shape)) if d == 1 and o > 1)

    def vjp(g):
        gr = g.sum(axis=axes, keepdims=True) if axes else g
        _acc(x, gr.reshape(x.shape))

    return _record("expand", out, (x,), vjp)


def narrow(x, axis, start, length):
    """Contiguous slice along one axis."""
    x = _t(x)
    axis = axis % x.ndim
    idx = tuple(
        slice(start, start + length) if i == axis else slice(None)
        for i in range(x.ndim)
    )
    out = Tensor(x.data[idx])

    def vjp(g):
        full = np.zeros_like(x.data)
        full[idx] = g
        _acc(x, full)

    return _record("narrow", out, (x,), vjp)


def concat(parts, axis):
    parts = [_t(p) for p in parts]
    axis = axis % parts[0].ndim
    out = Tensor(np.concatenate([p.data for p in parts], axis=axis))
    sizes = [p.shape[axis] for p in parts]

    def vjp(g):
        off = 0
        for p, s in zip(parts, sizes):
            idx = tuple(
                slice(off, off + s) if i == axis else slice(None)
                for i in range(g.ndim)
            )
            _acc(p, g[idx])
            off += s

    return _record("concat", out, tuple(parts), vjp)


def take_rows(table, ids):
    """Row gather from a 2-D table; gradient scatter-adds."""
    table = _t(table)
    ids = np.asarray(ids)
    if table.ndim != 2:
        raise ShapeError(f"take_rows wants a 2-D table, got {table.shape}")
    out = Tensor(table.data[ids])

    def vjp(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, ids, g)
        _acc(table, gt)

    return _record("take_rows", out, (table,), vjp)


# ---------------------------------------------------------------------------
# composite kernels with bespoke vjps

_MASK_CACHE = {}


def _additive_mask(mask, dtype):
    """Validate once and convert to an additive (0 / -inf) array, cached by
    the mask array's identity (masks are built once and reused)."""
    key = (id(mask), dtype)
    hit = _MASK_CACHE.get(key)
    if hit is not None:
        return hit
    m = np.asarray(mask, dtype=bool)
    alive = m.any(axis=-1)
    if not alive.all():
        row = np.argwhere(~alive)[0]
        raise ValueError(f"softmax row {tuple(int(i) for i in row)} is fully masked")
    add = np.where(m, dtype.type(0), dtype.type(-np.inf))
    _MASK_CACHE[key] = (mask, add)  # hold the mask so its id stays valid
    return (mask, add)


def softmax(x, mask=None):
    """Row softmax over the last axis.

    mask is a constant boolean array broadcastable to x; masked entries come
    out exactly 0 and receive no gradient. A fully masked row is an error
    naming the row.
    """
    x = _t(x)
    d = x.data
    if mask is not None:
        scores = d + _additive_mask(mask, d.dtype)[1]
    else:
        scores = d
    mx = scores.max(axis=-1, keepdims=True)
    e = np.exp(scores - mx)  # exp(-inf) == 0 exactly, so masked entries vanish
    p = e / e.sum(axis=-1, keepdims=True)
    _check_finite("softmax", p)
    out = Tensor(p)

    def vjp(g):
        gp = g * p
        _acc(x, gp - p * gp.sum(axis=-1, keepdims=True))

    return _record("softmax", out, (x,), vjp)


def layernorm_affine(x, gamma, beta, eps=1e-6):
    """Normalize the last axis, then scale/shift per channel."""
    x, gamma, beta = _t(x), _t(gamma), _t(beta)
    d = x.data
    mu = d.mean(axis=-1, keepdims=True)
    xc = d - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + d.dtype.type(eps))
    xhat = xc * inv
    out_d = xhat * gamma.data + beta.data
    _check_finite("layernorm", out_d)
    out = Tensor(out_d)
    n = d.shape[-1]

    def vjp(g):
        lead = tuple(range(g.ndim - 1))
        _acc(gamma, (g * xhat).sum(axis=lead))
        _acc(beta, g.sum(axis=lead))
        gx = g * gamma.data
        term = gx - gx.mean(axis=-1, keepdims=True) \
            - xhat * (gx * xhat).mean(axis=-1, keepdims=True)
        _acc(x, (inv * term).astype(d.dtype))

    return _record("layernorm", out, (x, gamma, beta), vjp)


def rotate_pairs(x, cos, sin):
    """Rotate (even, odd) channel pairs of the last axis by constant angles.

    cos/sin have shape broadcastable to x's last-axis-halved layout, e.g.
    (tokens, d/2) against x of shape (..., tokens, d). The map is linear in
    x, so the vjp is rotation by the negated angles.
    """
    x = _t(x)
    d = x.data
    if d.shape[-1] % 2:
        raise ShapeError(f"rotate_pairs needs an even last dim, got {d.shape}")
    xe, xo = d[..., 0::2], d[..., 1::2]
    out_d = np.empty_like(d)
    out_d[..., 0::2] = xe * cos - xo * sin
    out_d[..., 1::2] = xe * sin + xo * cos
    _check_finite("rotate_pairs", out_d)
    out = Tensor(out_d)

    def vjp(g):
        ge, go = g[..., 0::2], g[..., 1::2]
        gx = np.empty_like(g)
        gx[..., 0::2] = ge * cos + go * sin
        gx[..., 1::2] = -ge * sin + go * cos
        _acc(x, gx)

    return _record("rotate_pairs", out, (x,), vjp)


def cosine_similarity(u, v):
    """Cosine of the angle between two flat vectors; zero norm is an error."""
    u, v = _t(u), _t(v)
    if u.ndim != 1 or v.ndim != 1:
        raise ShapeError(f"cosine_similarity wants flat vectors, got {u.shape}, {v.shape}")
    if u.shape != v.shape:
        raise ShapeError(f"cosine_similarity length mismatch: {u.shape} vs {v.shape}")
    ud, vd = u.data, v.data
    nu = float(np.sqrt(np.dot(ud, ud)))
    nv = float(np.sqrt(np.dot(vd, vd)))
    if nu == 0.0 or nv == 0.0:
        raise ValueError("cosine_similarity of a zero-norm vector is undefined")
    dot = float(np.dot(ud, vd))
    c = dot / (nu * nv)
    out = Tensor(np.asarray(c, dtype=ud.dtype))

    def vjp(g):
        gs = float(g)
        _acc(u, (gs * (vd / (nu * nv) - c * ud / (nu * nu))).astype(ud.dtype))
        _acc(v, (gs * (ud / (nu * nv) - c * vd / (nv * nv))).astype(vd.dtype))

    return _record("cosine_similarity", out, (u, v), vjp)


def mse(a, b):
    """Mean squared difference, as a scalar tensor."""
    diff = sub(a, b)
    return t_mean(square(diff))
