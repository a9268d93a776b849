"""Dense tensors with reverse-mode automatic differentiation.

Tensors wrap numpy arrays in float32 or float64 (selectable per run). Ops
record an OpNode graph whenever an input requires a gradient and grad mode
is on; `backward` then walks the graph once in reverse topological order
and accumulates gradients into the requiring leaves.

Broadcasting is intentionally narrow: shapes must be equal, or one operand
is a scalar, or numpy's trailing-dimension rules apply (leading-batch /
size-1 expansion). Everything else is a ShapeError naming the op.
"""

from __future__ import annotations

import math
from contextlib import contextmanager
from functools import lru_cache

import numpy as np

__all__ = [
    "Tensor", "OpNode", "ShapeError", "NumericalError",
    "apply", "backward", "grad_check", "no_grad", "set_default_dtype",
    "default_dtype",
]

_FLOAT_DTYPES = (np.dtype(np.float32), np.dtype(np.float64))
_DEFAULT_DTYPE = np.dtype(np.float32)
_GRAD_ENABLED = True


class ShapeError(ValueError):
    """Raised when operand shapes are invalid for an operation."""


class NumericalError(RuntimeError):
    """Raised when an operation encounters non-finite values it cannot accept."""


def set_default_dtype(dtype) -> None:
    """Set the dtype used for tensors built from plain python data."""
    global _DEFAULT_DTYPE
    dt = np.dtype(dtype)
    if dt not in _FLOAT_DTYPES:
        raise ValueError(f"default dtype must be float32 or float64, got {dt}")
    _DEFAULT_DTYPE = dt


def default_dtype() -> np.dtype:
    return _DEFAULT_DTYPE


@contextmanager
def no_grad():
    """Disable graph recording inside the context."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


class OpNode:
    """Record of the op that produced a tensor: kind, ordered inputs, attrs.

    `backward_fn(g)` returns one gradient array (or None) per input.
    """

    __slots__ = ("kind", "inputs", "attrs", "backward_fn")

    def __init__(self, kind, inputs, attrs, backward_fn):
        self.kind = kind
        self.inputs = inputs
        self.attrs = attrs
        self.backward_fn = backward_fn

    def __repr__(self):
        return f"OpNode({self.kind}, {len(self.inputs)} inputs)"


class Tensor:
    """A dense value array with an optional gradient and graph backtrace."""

    __slots__ = ("data", "grad", "requires_grad", "node")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        if isinstance(data, np.ndarray) and dtype is None:
            arr = data if data.dtype in _FLOAT_DTYPES else data.astype(_DEFAULT_DTYPE)
        else:
            arr = np.asarray(data, dtype=np.dtype(dtype) if dtype is not None else None)
            if arr.dtype not in _FLOAT_DTYPES:
                arr = arr.astype(_DEFAULT_DTYPE)
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self.node = None

    # -- introspection ----------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _scalar_err(self)

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self):
        tag = ", grad" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype.name}{tag})"

    # -- operator sugar ----------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_wrap(other, self), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return permute(self, axes)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def backward(self):
        return backward(self)


def _scalar_err(t):
    raise ShapeError(f"item() needs a single-element tensor, got shape {t.shape}")


def _wrap(x, like: Tensor) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=like.data.dtype))


def _check_dtypes(kind, tensors):
    dt = tensors[0].data.dtype
    for t in tensors[1:]:
        if t.data.dtype != dt:
            raise ShapeError(
                f"{kind}: mixed dtypes {dt.name} and {t.data.dtype.name}; cast explicitly")
    return dt


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    """Reduce gradient g back to `shape` after numpy broadcasting."""
    if g.shape == tuple(shape):
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _check_broadcast(kind, a, b):
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{kind}: shapes {a.shape} and {b.shape} do not align") from None


# -- op registry and graph recording --------------------------------------

_OPS = {}


def _register(kind):
    def deco(fn):
        _OPS[kind] = fn
        return fn
    return deco


def _make(kind, out_data, inputs, attrs, backward_fn):
    out = Tensor.__new__(Tensor)
    out.data = out_data
    out.grad = None
    out.node = None
    out.requires_grad = False
    if _GRAD_ENABLED and any(t.requires_grad for t in inputs):
        out.node = OpNode(kind, tuple(inputs), attrs, backward_fn)
        out.requires_grad = True
    return out


def apply(kind: str, inputs, **attrs) -> Tensor:
    """Apply a registered primitive by name. Raises on unknown kinds."""
    fn = _OPS.get(kind)
    if fn is None:
        raise ValueError(f"unknown op kind {kind!r}; known: {sorted(_OPS)}")
    return fn(*inputs, **attrs)


# -- elementwise -----------------------------------------------------------


@_register("add")
def add(a, b) -> Tensor:
    a = a if isinstance(a, Tensor) else _wrap(a, b)
    b = _wrap(b, a)
    _check_dtypes("add", (a, b))
    _check_broadcast("add", a.data, b.data)
    out = a.data + b.data

    def back(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make("add", out, (a, b), None, back)


@_register("sub")
def sub(a, b) -> Tensor:
    a = a if isinstance(a, Tensor) else _wrap(a, b)
    b = _wrap(b, a)
    _check_dtypes("sub", (a, b))
    _check_broadcast("sub", a.data, b.data)
    out = a.data - b.data

    def back(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _make("sub", out, (a, b), None, back)


@_register("mul")
def mul(a, b) -> Tensor:
    a = a if isinstance(a, Tensor) else _wrap(a, b)
    b = _wrap(b, a)
    _check_dtypes("mul", (a, b))
    _check_broadcast("mul", a.data, b.data)
    out = a.data * b.data

    def back(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _make("mul", out, (a, b), None, back)


@_register("div")
def div(a, b) -> Tensor:
    a = a if isinstance(a, Tensor) else _wrap(a, b)
    b = _wrap(b, a)
    _check_dtypes("div", (a, b))
    _check_broadcast("div", a.data, b.data)
    out = a.data / b.data

    def back(g):
        ga = _unbroadcast(g / b.data, a.shape)
        gb = _unbroadcast(-g * a.data / (b.data * b.data), b.shape)
        return ga, gb

    return _make("div", out, (a, b), None, back)


@_register("neg")
def neg(a: Tensor) -> Tensor:
    out = -a.data

    def back(g):
        return (-g,)

    return _make("neg", out, (a,), None, back)


@_register("silu")
def silu(a: Tensor) -> Tensor:
    """Sigmoid-weighted linear unit x * sigmoid(x)."""
    s = 1.0 / (1.0 + np.exp(-a.data))
    out = a.data * s

    def back(g):
        return (g * s * (1.0 + a.data * (1.0 - s)),)

    return _make("silu", out, (a,), None, back)


@_register("clamp")
def clamp(a: Tensor, lo: float, hi: float) -> Tensor:
    out = np.clip(a.data, lo, hi)

    def back(g):
        mask = (a.data >= lo) & (a.data <= hi)
        return (g * mask,)

    return _make("clamp", out, (a,), {"lo": lo, "hi": hi}, back)


@_register("bce")
def bce(p: Tensor, target) -> Tensor:
    """Elementwise binary cross-entropy on probability inputs.

    Probabilities are guarded into [1e-6, 1 - 1e-6] before the logs; the
    gradient is zero where the guard clipped. No gradient flows to target.
    """
    target = _wrap(target, p)
    _check_dtypes("bce", (p, target))
    if p.shape != target.shape:
        raise ShapeError(f"bce: prediction shape {p.shape} != target shape {target.shape}")
    lo = 1e-6
    hi = 1.0 - 1e-6
    pc = np.clip(p.data, lo, hi)
    t = target.data
    out = -(t * np.log(pc) + (1.0 - t) * np.log1p(-pc))

    def back(g):
        mask = (p.data >= lo) & (p.data <= hi)
        gp = g * mask * (pc - t) / (pc * (1.0 - pc))
        return gp, None

    return _make("bce", out, (p, target), None, back)


# -- reductions ------------------------------------------------------------


def _norm_axis(axis, ndim):
    if axis is None:
        return None
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


@_register("sum")
def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axis = _norm_axis(axis, a.ndim)
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def back(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _make("sum", np.asarray(out, dtype=a.data.dtype), (a,),
                 {"axis": axis, "keepdims": keepdims}, back)


@_register("mean")
def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axis = _norm_axis(axis, a.ndim)
    out = a.data.mean(axis=axis, keepdims=keepdims)
    count = a.data.size if axis is None else math.prod(a.shape[i] for i in axis)

    def back(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape) / count,)

    return _make("mean", np.asarray(out, dtype=a.data.dtype), (a,),
                 {"axis": axis, "keepdims": keepdims}, back)


@_register("amax")
def amax(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    """Max reduction; ties split the gradient evenly."""
    axis = _norm_axis(axis, a.ndim)
    out = a.data.max(axis=axis, keepdims=keepdims)

    def back(g):
        full = a.data.max(axis=axis, keepdims=True)
        mask = (a.data == full)
        counts = mask.sum(axis=axis, keepdims=True)
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (mask * (g / counts),)

    return _make("amax", np.asarray(out, dtype=a.data.dtype), (a,),
                 {"axis": axis, "keepdims": keepdims}, back)


@_register("softmax")
def softmax(a: Tensor, axis: int = -1) -> Tensor:
    ax = axis % a.ndim
    shifted = a.data - a.data.max(axis=ax, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=ax, keepdims=True)

    def back(g):
        dot = (g * out).sum(axis=ax, keepdims=True)
        return (out * (g - dot),)

    return _make("softmax", out, (a,), {"axis": ax}, back)


# -- shape manipulation -----------------------------------------------------


@_register("reshape")
def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    if math.prod(shape if -1 not in shape else [s for s in shape if s != -1]) > 0 \
            and -1 not in shape and math.prod(shape) != a.size:
        raise ShapeError(f"reshape: cannot view {a.shape} as {shape}")
    out = a.data.reshape(shape)

    def back(g):
        return (g.reshape(a.shape),)

    return _make("reshape", out, (a,), {"shape": shape}, back)


@_register("permute")
def permute(a: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    if sorted(axes) != list(range(a.ndim)):
        raise ShapeError(f"permute: axes {axes} invalid for ndim {a.ndim}")
    out = np.ascontiguousarray(a.data.transpose(axes))
    inv = np.argsort(axes)

    def back(g):
        return (np.ascontiguousarray(g.transpose(inv)),)

    return _make("permute", out, (a,), {"axes": axes}, back)


@_register("concat")
def concat(tensors, axis: int = 0) -> Tensor:
    tensors = tuple(tensors)
    if not tensors:
        raise ShapeError("concat: needs at least one tensor")
    _check_dtypes("concat", tensors)
    ax = axis % tensors[0].ndim
    out = np.concatenate([t.data for t in tensors], axis=ax)
    sizes = [t.shape[ax] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def back(g):
        return tuple(np.ascontiguousarray(p) for p in np.split(g, splits, axis=ax))

    return _make("concat", out, tensors, {"axis": ax}, back)


@_register("select")
def select(a: Tensor, axis: int, index: int) -> Tensor:
    """Take one slice along an axis (like numpy take with a scalar index)."""
    ax = axis % a.ndim
    if not (0 <= index < a.shape[ax]):
        raise ShapeError(f"select: index {index} out of range for axis {ax} of {a.shape}")
    out = np.ascontiguousarray(a.data.take(index, axis=ax))

    def back(g):
        ga = np.zeros_like(a.data)
        sl = [slice(None)] * a.ndim
        sl[ax] = index
        ga[tuple(sl)] = g
        return (ga,)

    return _make("select", out, (a,), {"axis": ax, "index": index}, back)


@_register("embedding")
def embedding(table: Tensor, ids) -> Tensor:
    """Row lookup into `table` by an integer id array."""
    ids = np.asarray(ids)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise ShapeError(
            f"embedding: id out of range for table with {table.shape[0]} rows")
    out = table.data[ids]

    def back(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, ids, g)
        return (gt,)

    return _make("embedding", out, (table,), {"ids": ids}, back)


# -- matmul ------------------------------------------------------------------


@_register("matmul")
def matmul(a: Tensor, b: Tensor) -> Tensor:
    _check_dtypes("matmul", (a, b))
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul: operands must be >=2-D, got {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner dims differ, {a.shape} @ {b.shape}")
    if a.ndim > 2 and b.ndim > 2 and a.shape[:-2] != b.shape[:-2]:
        raise ShapeError(f"matmul: batch dims differ, {a.shape} @ {b.shape}")
    if a.ndim == 2 and b.ndim > 2:
        raise ShapeError(f"matmul: 2-D @ batched unsupported, {a.shape} @ {b.shape}")
    out = a.data @ b.data

    def back(g):
        if b.ndim == 2:
            ga = g @ b.data.T
            if a.ndim == 2:
                gb = a.data.T @ g
            else:
                gb = a.data.reshape(-1, a.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        else:
            ga = g @ np.swapaxes(b.data, -1, -2)
            gb = np.swapaxes(a.data, -1, -2) @ g
        return ga, gb

    return _make("matmul", out, (a, b), None, back)


# -- spatial ops -------------------------------------------------------------


def _im2col(xp, KH, KW, Ho, Wo, stride):
    B, C = xp.shape[:2]
    col = np.empty((B, C, KH, KW, Ho, Wo), dtype=xp.dtype)
    for kh in range(KH):
        for kw in range(KW):
            col[:, :, kh, kw] = xp[:, :, kh:kh + stride * Ho:stride,
                                   kw:kw + stride * Wo:stride]
    return col


@_register("conv2d")
def conv2d(x: Tensor, w: Tensor, stride: int = 1, pad: int = 1) -> Tensor:
    """2-D cross-correlation, NCHW layout, square symmetric padding."""
    _check_dtypes("conv2d", (x, w))
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeError(f"conv2d: need 4-D input and kernel, got {x.shape}, {w.shape}")
    B, Ci, H, W_ = x.shape
    Co, Ci2, KH, KW = w.shape
    if Ci != Ci2:
        raise ShapeError(f"conv2d: input channels {Ci} != kernel channels {Ci2}")
    Ho = (H + 2 * pad - KH) // stride + 1
    Wo = (W_ + 2 * pad - KW) // stride + 1
    if Ho < 1 or Wo < 1:
        raise ShapeError(f"conv2d: kernel {KH}x{KW} too large for input {H}x{W_} pad {pad}")
    xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x.data
    col = _im2col(xp, KH, KW, Ho, Wo, stride)
    mat = col.transpose(0, 4, 5, 1, 2, 3).reshape(B * Ho * Wo, Ci * KH * KW)
    out = (mat @ w.data.reshape(Co, -1).T).reshape(B, Ho, Wo, Co).transpose(0, 3, 1, 2)
    out = np.ascontiguousarray(out)

    def back(g):
        g_mat = np.ascontiguousarray(g.transpose(0, 2, 3, 1)).reshape(-1, Co)
        gw = (g_mat.T @ mat).reshape(Co, Ci, KH, KW)
        dcol = (g_mat @ w.data.reshape(Co, -1)).reshape(B, Ho, Wo, Ci, KH, KW)
        dcol = dcol.transpose(0, 3, 4, 5, 1, 2)
        dxp = np.zeros_like(xp)
        for kh in range(KH):
            for kw in range(KW):
                dxp[:, :, kh:kh + stride * Ho:stride,
                    kw:kw + stride * Wo:stride] += dcol[:, :, kh, kw]
        gx = dxp[:, :, pad:pad + H, pad:pad + W_] if pad else dxp
        return np.ascontiguousarray(gx), gw

    return _make("conv2d", out, (x, w), {"stride": stride, "pad": pad}, back)


@_register("upsample_nearest2")
def upsample_nearest2(x: Tensor) -> Tensor:
    """Nearest-neighbour 2x spatial upsampling, NCHW."""
    if x.ndim != 4:
        raise ShapeError(f"upsample_nearest2: need 4-D input, got {x.shape}")
    out = x.data.repeat(2, axis=2).repeat(2, axis=3)

    def back(g):
        B, C, H2, W2 = g.shape
        return (g.reshape(B, C, H2 // 2, 2, W2 // 2, 2).sum(axis=(3, 5)),)

    return _make("upsample_nearest2", out, (x,), None, back)


@_register("group_norm")
def group_norm(x: Tensor, gamma: Tensor, beta: Tensor, groups: int,
               eps: float = 1e-5) -> Tensor:
    _check_dtypes("group_norm", (x, gamma, beta))
    if x.ndim != 4:
        raise ShapeError(f"group_norm: need 4-D input, got {x.shape}")
    B, C, H, W_ = x.shape
    if C % groups:
        raise ShapeError(f"group_norm: channels {C} not divisible by {groups} groups")
    if gamma.shape != (C,) or beta.shape != (C,):
        raise ShapeError(f"group_norm: gamma/beta must be ({C},)")
    xg = x.data.reshape(B, groups, -1)
    mu = xg.mean(axis=2, keepdims=True)
    var = xg.var(axis=2, keepdims=True)
    invstd = 1.0 / np.sqrt(var + eps)
    xhat = ((xg - mu) * invstd).reshape(B, C, H, W_)
    out = xhat * gamma.data.reshape(1, C, 1, 1) + beta.data.reshape(1, C, 1, 1)

    def back(g):
        ggamma = (g * xhat).sum(axis=(0, 2, 3))
        gbeta = g.sum(axis=(0, 2, 3))
        dxhat = (g * gamma.data.reshape(1, C, 1, 1)).reshape(B, groups, -1)
        xh = xhat.reshape(B, groups, -1)
        n = xh.shape[2]
        gx = (invstd / n) * (n * dxhat - dxhat.sum(axis=2, keepdims=True)
                             - xh * (dxhat * xh).sum(axis=2, keepdims=True))
        return gx.reshape(B, C, H, W_), ggamma, gbeta

    return _make("group_norm", out, (x, gamma, beta),
                 {"groups": groups, "eps": eps}, back)


@lru_cache(maxsize=128)
def _resize_matrix(n_in: int, n_out: int, dtype_name: str) -> np.ndarray:
    """Corner-aligned linear interpolation matrix mapping n_in -> n_out samples."""
    m = np.zeros((n_out, n_in), dtype=np.dtype(dtype_name))
    if n_in == 1:
        m[:, 0] = 1.0
        return m
    for o in range(n_out):
        src = 0.0 if n_out == 1 else o * (n_in - 1) / (n_out - 1)
        i0 = min(int(math.floor(src)), n_in - 2)
        frac = src - i0
        m[o, i0] += 1.0 - frac
        m[o, i0 + 1] += frac
    return m


@_register("bilinear_resize")
def bilinear_resize(x: Tensor, out_h: int, out_w: int) -> Tensor:
    """Bilinear resize of the two trailing axes, corner-aligned convention."""
    if x.ndim < 2:
        raise ShapeError(f"bilinear_resize: need >=2-D input, got {x.shape}")
    H, W_ = x.shape[-2:]
    R = _resize_matrix(H, out_h, x.data.dtype.name)
    Cm = _resize_matrix(W_, out_w, x.data.dtype.name)
    out = R @ x.data @ Cm.T

    def back(g):
        return (R.T @ g @ Cm,)

    return _make("bilinear_resize", out, (x,), {"out_h": out_h, "out_w": out_w}, back)


# -- backward engine ---------------------------------------------------------


def backward(loss: Tensor, free_graph: bool = True):
    """Backpropagate from a scalar loss; returns {leaf Tensor: grad array}.

    Gradients are also accumulated into `.grad` of every requires_grad leaf.
    The graph is detached afterwards unless free_graph is False.
    """
    if loss.size != 1:
        raise ShapeError(f"backward: loss must be scalar, got shape {loss.shape}")
    if loss.node is None:
        if loss.requires_grad:
            g = np.ones_like(loss.data)
            loss.grad = g if loss.grad is None else loss.grad + g
            return {loss: loss.grad}
        return {}

    topo = []
    seen = set()
    stack = [(loss, False)]
    while stack:
        t, done = stack.pop()
        if done:
            topo.append(t)
            continue
        if id(t) in seen:
            continue
        seen.add(id(t))
        stack.append((t, True))
        for inp in t.node.inputs:
            if inp.node is not None and id(inp) not in seen:
                stack.append((inp, False))

    grads = {id(loss): np.ones_like(loss.data)}
    leaf_grads = {}
    for t in reversed(topo):
        g = grads.pop(id(t), None)
        if g is None:
            continue
        input_grads = t.node.backward_fn(g)
        for inp, gi in zip(t.node.inputs, input_grads):
            if gi is None:
                continue
            if inp.node is not None:
                acc = grads.get(id(inp))
                grads[id(inp)] = gi if acc is None else acc + gi
            elif inp.requires_grad:
                inp.grad = gi if inp.grad is None else inp.grad + gi
                leaf_grads[inp] = inp.grad
    if free_graph:
        for t in topo:
            t.node = None
    return leaf_grads


def grad_check(f, x: Tensor, eps: float = 1e-5) -> float:
    """Compare backward() against central finite differences.

    Returns max over coordinates of |g_ad - g_fd| / max(|g_ad|, |g_fd|, 1e-8).
    f must map a tensor to a scalar Tensor deterministically.
    """
    if eps <= 0:
        raise ValueError(f"grad_check: eps must be positive, got {eps}")
    probe = Tensor(x.data.copy(), requires_grad=True)
    out = f(probe)
    if not np.isfinite(out.data).all():
        raise NumericalError("grad_check: function output is non-finite")
    backward(out)
    g_ad = probe.grad if probe.grad is not None else np.zeros_like(probe.data)

    flat = x.data.reshape(-1).copy()
    g_fd = np.empty_like(flat)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        with no_grad():
            hi = f(Tensor(flat.reshape(x.shape))).item()
        flat[i] = orig - eps
        with no_grad():
            lo = f(Tensor(flat.reshape(x.shape))).item()
        flat[i] = orig
        if not (math.isfinite(hi) and math.isfinite(lo)):
            raise NumericalError(f"grad_check: non-finite output at coordinate {i}")
        g_fd[i] = (hi - lo) / (2.0 * eps)

    ga = g_ad.reshape(-1)
    denom = np.maximum(np.maximum(np.abs(ga), np.abs(g_fd)), 1e-8)
    return float(np.max(np.abs(ga - g_fd) / denom))
