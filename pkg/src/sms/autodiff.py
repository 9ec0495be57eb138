"""Dense float64 tensors with reverse-mode differentiation.

Implements exactly the primitives the trainable parts of this project
need: broadcasted elementwise arithmetic, matmul, strided 2-d convolution
and its transpose, reductions, stable softmax/logsumexp, slicing, concat
and reshape.  The graph is rebuilt on every forward pass; tensors are
treated as immutable values.  Everything is float64: at this scale
precision buys exact invertibility and tight gradient checks for free.
"""
from __future__ import annotations

import contextlib
import contextvars

import numpy as np


class ShapeError(ValueError):
    """Operand shapes incompatible for the requested op."""


class DomainError(ValueError):
    """Input outside the mathematical domain of the op (log/sqrt/div)."""


_GRAD_ENABLED = contextvars.ContextVar("sms_grad_enabled", default=True)


@contextlib.contextmanager
def no_grad():
    """Disable graph construction inside the block (inference mode)."""
    token = _GRAD_ENABLED.set(False)
    try:
        yield
    finally:
        _GRAD_ENABLED.reset(token)


class Tensor:
    """N-d float64 array plus the graph edge that produced it."""

    __slots__ = ("data", "requires_grad", "parents", "vjp", "op")

    def __init__(self, data, requires_grad=False, parents=(), vjp=None, op=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.parents = parents
        self.vjp = vjp
        self.op = op

    # -- metadata ----------------------------------------------------------
    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def item(self):
        return float(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self.op or 'leaf'})"

    # -- operator sugar ----------------------------------------------------
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

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return take(self, key)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def sum(self, axis=None, keepdims=False):
        return sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)


def as_tensor(value):
    return value if isinstance(value, Tensor) else Tensor(value)


def _make(data, parents, vjp, op):
    """Wrap an op result; only record the edge when a grad is wanted."""
    if _GRAD_ENABLED.get() and any(p.requires_grad for p in parents):
        return Tensor(data, requires_grad=True, parents=parents, vjp=vjp, op=op)
    return Tensor(data, op=op)


def _unbroadcast(grad, shape):
    """Sum `grad` down to `shape` (reverse of numpy broadcasting)."""
    if grad.shape == tuple(shape):
        return grad
    extra = grad.ndim - len(shape)
    if extra:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _check_broadcast(op, a, b):
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast") from None


# -- elementwise binary ops -------------------------------------------------

def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("add", a, b)

    def vjp(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(a.data + b.data, (a, b), vjp, "add")


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("sub", a, b)

    def vjp(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _make(a.data - b.data, (a, b), vjp, "sub")


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("mul", a, b)

    def vjp(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _make(a.data * b.data, (a, b), vjp, "mul")


def div(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("div", a, b)
    if np.any(b.data == 0.0):
        raise DomainError("div: denominator contains zero")

    def vjp(g):
        ga = g / b.data
        gb = -g * a.data / (b.data * b.data)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _make(a.data / b.data, (a, b), vjp, "div")


# -- matmul ------------------------------------------------------------------

def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul: operands must be >=2-d, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner dims differ, {a.shape} @ {b.shape}")
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise ShapeError(f"matmul: batch dims of {a.shape} and {b.shape} do not broadcast") from None

    def vjp(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _make(a.data @ b.data, (a, b), vjp, "matmul")


# -- convolution --------------------------------------------------------------

def _im2col(xp, kh, kw, stride, ho, wo):
    """xp: padded [N,C,Hp,Wp] -> columns [N,C,kh,kw,ho,wo]."""
    n, c = xp.shape[:2]
    cols = np.empty((n, c, kh, kw, ho, wo), dtype=np.float64)
    for i in range(kh):
        for j in range(kw):
            cols[:, :, i, j] = xp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride]
    return cols


def _col2im(cols, stride, pad, h, w):
    """Scatter-add columns [N,C,kh,kw,ho,wo] back to images [N,C,h,w]."""
    n, c, kh, kw, ho, wo = cols.shape
    out = np.zeros((n, c, h + 2 * pad, w + 2 * pad), dtype=np.float64)
    for i in range(kh):
        for j in range(kw):
            out[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += cols[:, :, i, j]
    if pad:
        out = out[:, :, pad:-pad, pad:-pad]
    return out


def _conv_geometry(op, x, w, stride, padding):
    if not (isinstance(stride, int) and stride >= 1):
        raise ShapeError(f"{op}: stride must be a positive int, got {stride!r}")
    if not (isinstance(padding, int) and padding >= 0):
        raise ShapeError(f"{op}: padding must be a non-negative int, got {padding!r}")
    if x.ndim not in (3, 4):
        raise ShapeError(f"{op}: input must be [C,H,W] or [N,C,H,W], got {x.shape}")
    if w.ndim != 4:
        raise ShapeError(f"{op}: kernel must be 4-d, got {w.shape}")


def conv2d(x, w, stride=1, padding=0):
    """2-d convolution. x: [C,H,W] or [N,C,H,W]; w: [out_ch,in_ch,kH,kW]."""
    x, w = as_tensor(x), as_tensor(w)
    _conv_geometry("conv2d", x, w, stride, padding)
    squeeze = x.ndim == 3
    xd = x.data[None] if squeeze else x.data
    n, c, h, wi = xd.shape
    o, ci, kh, kw = w.shape
    if ci != c:
        raise ShapeError(f"conv2d: input has {c} channels but kernel expects {ci} ({x.shape} vs {w.shape})")
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (wi + 2 * padding - kw) // stride + 1
    if ho < 1 or wo < 1:
        raise ShapeError(f"conv2d: kernel {w.shape} does not fit input {x.shape} with stride={stride} padding={padding}")
    xp = np.pad(xd, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else xd
    cols = _im2col(xp, kh, kw, stride, ho, wo).reshape(n, c * kh * kw, ho * wo)
    wf = w.data.reshape(o, c * kh * kw)
    y = (wf @ cols).reshape(n, o, ho, wo)

    def vjp(g):
        gf = g.reshape(n, o, ho * wo) if not squeeze else g.reshape(1, o, ho * wo)
        gw = np.tensordot(gf, cols, axes=([0, 2], [0, 2])).reshape(w.shape)
        gcols = (wf.T @ gf).reshape(n, c, kh, kw, ho, wo)
        gx = _col2im(gcols, stride, padding, h, wi)
        return (gx[0] if squeeze else gx), gw

    return _make(y[0] if squeeze else y, (x, w), vjp, "conv2d")


def conv_transpose2d(x, w, stride=1, padding=0):
    """Transposed 2-d convolution (adjoint of conv2d's input map).

    x: [C,H,W] or [N,C,H,W]; w: [in_ch,out_ch,kH,kW].  Output spatial size
    is (H-1)*stride + kH - 2*padding.
    """
    x, w = as_tensor(x), as_tensor(w)
    _conv_geometry("conv_transpose2d", x, w, stride, padding)
    squeeze = x.ndim == 3
    xd = x.data[None] if squeeze else x.data
    n, c, h, wi = xd.shape
    ci, o, kh, kw = w.shape
    if ci != c:
        raise ShapeError(f"conv_transpose2d: input has {c} channels but kernel expects {ci} ({x.shape} vs {w.shape})")
    hy = (h - 1) * stride + kh - 2 * padding
    wy = (wi - 1) * stride + kw - 2 * padding
    if hy < 1 or wy < 1:
        raise ShapeError(f"conv_transpose2d: output collapses for input {x.shape} kernel {w.shape} padding={padding}")
    wf = w.data.reshape(c, o * kh * kw)
    xf = xd.reshape(n, c, h * wi)
    cols = (wf.T[None] @ xf).reshape(n, o, kh, kw, h, wi)
    y = _col2im(cols, stride, padding, hy, wy)

    def vjp(g):
        gd = g[None] if squeeze else g
        gp = np.pad(gd, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else gd
        gcols = _im2col(gp, kh, kw, stride, h, wi).reshape(n, o * kh * kw, h * wi)
        gx = np.matmul(wf[None], gcols).reshape(n, c, h, wi)
        gw = np.tensordot(xf, gcols, axes=([0, 2], [0, 2])).reshape(w.shape)
        return (gx[0] if squeeze else gx), gw

    return _make(y[0] if squeeze else y, (x, w), vjp, "conv_transpose2d")


# -- elementwise unary ops -----------------------------------------------------

def relu(x):
    x = as_tensor(x)
    mask = x.data > 0

    def vjp(g):
        return (g * mask,)

    return _make(np.where(mask, x.data, 0.0), (x,), vjp, "relu")


def tanh(x):
    x = as_tensor(x)
    y = np.tanh(x.data)

    def vjp(g):
        return (g * (1.0 - y * y),)

    return _make(y, (x,), vjp, "tanh")


def exp(x):
    x = as_tensor(x)
    y = np.exp(x.data)

    def vjp(g):
        return (g * y,)

    return _make(y, (x,), vjp, "exp")


def log(x):
    x = as_tensor(x)
    if np.any(x.data <= 0.0):
        raise DomainError("log: input must be strictly positive")

    def vjp(g):
        return (g / x.data,)

    return _make(np.log(x.data), (x,), vjp, "log")


def square(x):
    x = as_tensor(x)

    def vjp(g):
        return (2.0 * x.data * g,)

    return _make(x.data * x.data, (x,), vjp, "square")


def sqrt(x):
    x = as_tensor(x)
    if np.any(x.data <= 0.0):
        raise DomainError("sqrt: input must be strictly positive")
    y = np.sqrt(x.data)

    def vjp(g):
        return (g / (2.0 * y),)

    return _make(y, (x,), vjp, "sqrt")


# -- reductions ----------------------------------------------------------------

def _norm_axis(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def sum(x, axis=None, keepdims=False):  # noqa: A001 - mirrors numpy naming
    x = as_tensor(x)
    axes = _norm_axis(axis, x.ndim)
    y = x.data.sum(axis=axes, keepdims=keepdims)

    def vjp(g):
        if not keepdims:
            g = np.expand_dims(g, axes) if axes else g
        return (np.broadcast_to(g, x.shape).copy(),)

    return _make(y, (x,), vjp, "sum")


def mean(x, axis=None, keepdims=False):
    x = as_tensor(x)
    axes = _norm_axis(axis, x.ndim)
    count = int(np.prod([x.shape[a] for a in axes])) if axes else 1
    y = x.data.mean(axis=axes, keepdims=keepdims) if axes else x.data.copy()

    def vjp(g):
        if not keepdims:
            g = np.expand_dims(g, axes) if axes else g
        return (np.broadcast_to(g / count, x.shape).copy(),)

    return _make(y, (x,), vjp, "mean")


def l2_norm(x, axis=None, keepdims=False):
    """Euclidean norm over `axis` (all dims when None); zero-safe gradient."""
    x = as_tensor(x)
    axes = _norm_axis(axis, x.ndim)
    y = np.sqrt((x.data * x.data).sum(axis=axes, keepdims=keepdims))

    def vjp(g):
        yk = y if keepdims else np.expand_dims(np.asarray(y), axes)
        gk = g if keepdims else np.expand_dims(np.asarray(g), axes)
        denom = np.where(yk == 0.0, 1.0, yk)
        return (np.where(yk == 0.0, 0.0, gk * x.data / denom),)

    return _make(y, (x,), vjp, "l2_norm")


def softmax(x, axis=-1):
    x = as_tensor(x)
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)

    def vjp(g):
        dot = (g * y).sum(axis=axis, keepdims=True)
        return (y * (g - dot),)

    return _make(y, (x,), vjp, "softmax")


def logsumexp(x, axis=None, keepdims=False):
    x = as_tensor(x)
    axes = _norm_axis(axis, x.ndim)
    m = x.data.max(axis=axes, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    e = np.exp(x.data - m)
    s = e.sum(axis=axes, keepdims=True)
    y = np.log(s) + m

    def vjp(g):
        gk = g if keepdims else np.expand_dims(np.asarray(g), axes)
        return (gk * (e / s),)

    out = y if keepdims else np.squeeze(y, axis=axes)
    return _make(out, (x,), vjp, "logsumexp")


# -- structural ops --------------------------------------------------------------

def take(x, key):
    """Basic (slice/int/tuple) indexing with scatter-add backward."""
    x = as_tensor(x)
    y = x.data[key]

    def vjp(g):
        gx = np.zeros_like(x.data)
        gx[key] += g
        return (gx,)

    return _make(y, (x,), vjp, "slice")


def concat(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    if not tensors:
        raise ShapeError("concat: need at least one tensor")
    ref = tensors[0]
    for t in tensors[1:]:
        if t.ndim != ref.ndim:
            raise ShapeError(f"concat: rank mismatch {ref.shape} vs {t.shape}")
    axis = axis % ref.ndim
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def vjp(g):
        sl = [slice(None)] * ref.ndim
        grads = []
        for i in range(len(sizes)):
            sl[axis] = slice(int(offsets[i]), int(offsets[i + 1]))
            grads.append(g[tuple(sl)])
        return tuple(grads)

    try:
        y = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError:
        raise ShapeError(f"concat: incompatible shapes {[t.shape for t in tensors]}") from None
    return _make(y, tuple(tensors), vjp, "concat")


def reshape(x, shape):
    x = as_tensor(x)
    try:
        y = x.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot view {x.shape} as {shape}") from None

    def vjp(g):
        return (g.reshape(x.shape),)

    return _make(y, (x,), vjp, "reshape")


# -- reverse pass -----------------------------------------------------------------

class Tape:
    """Ordered record of the ops reachable from a scalar loss.

    Built by a depth-first walk; the reverse replay visits every recorded
    node exactly once, so gradient accumulation is deterministic.
    """

    def __init__(self, loss):
        if not isinstance(loss, Tensor):
            raise TypeError("Tape expects a Tensor loss")
        if loss.size != 1:
            raise ShapeError(f"backward: loss must be scalar, got shape {loss.shape}")
        order = []
        seen = set()
        stack = [(loss, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node.parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
        self.loss = loss
        self.order = order

    def gradients(self):
        """Replay backward; returns accumulators keyed by node id."""
        acc = {id(self.loss): np.ones_like(self.loss.data)}
        for node in reversed(self.order):
            g = acc.get(id(node))
            if g is None or node.vjp is None:
                continue
            for parent, pg in zip(node.parents, node.vjp(g)):
                if pg is None or not parent.requires_grad:
                    continue
                pid = id(parent)
                if pid in acc:
                    acc[pid] = acc[pid] + pg
                else:
                    acc[pid] = pg
        return acc


def backward(loss, params):
    """Gradients of a scalar loss w.r.t. `params`.

    `params` is a mapping name -> Tensor or a sequence of Tensors; the
    result mirrors the container.  Parameters the loss does not reach get
    zero gradients.
    """
    acc = Tape(loss).gradients()
    if isinstance(params, dict):
        return {k: acc.get(id(p), np.zeros_like(p.data)) for k, p in params.items()}
    return [acc.get(id(p), np.zeros_like(p.data)) for p in params]
