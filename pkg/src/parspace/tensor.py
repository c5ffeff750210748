"""Dense float64 tensors with a record-on-execute reverse-mode tape.

Every op that touches a tensor requiring gradients records its parents and a
local backward rule on the output. ``backward`` walks the recorded nodes in
reverse creation order, which is a valid reverse topological order because a
node is always created after its parents.
"""

import contextlib
import itertools
import math

import numpy as np

from . import kernels


class DimensionError(ValueError):
    """Operand shapes are incompatible."""


class ContractError(RuntimeError):
    """An API precondition was violated."""


_ids = itertools.count()
_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable tape recording inside the block."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def is_grad_enabled():
    return _grad_enabled


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "parents", "backward_fn", "op", "id")

    __array_priority__ = 100.0

    def __init__(self, data, requires_grad=False):
        arr = np.array(data, dtype=np.float64)
        if any(s <= 0 for s in arr.shape):
            raise DimensionError(f"tensor extents must be positive, got {arr.shape}")
        self.data = np.ascontiguousarray(arr)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self.parents = ()
        self.backward_fn = None
        self.op = "leaf"
        self.id = next(_ids)

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
    def T(self):
        return transpose(self)

    def numpy(self):
        return self.data

    def item(self):
        if self.data.size != 1:
            raise ContractError(f"expected a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self):
        return Tensor(self.data.copy())

    def zero_grad(self):
        self.grad = None

    def backward(self):
        backward(self)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag}, op={self.op})"

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

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes or None)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def record(data, parents, backward_fn, op):
    """Wrap ``data`` as the output of an op over ``parents``.

    ``backward_fn(g)`` must return one gradient (or None) per parent.
    """
    out = Tensor.__new__(Tensor)
    out.data = data if data.dtype == np.float64 else data.astype(np.float64)
    out.grad = None
    out.id = next(_ids)
    out.op = op
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out.parents = tuple(parents)
        out.backward_fn = backward_fn
    else:
        out.requires_grad = False
        out.parents = ()
        out.backward_fn = None
    return out


def backward(loss):
    """Accumulate d(loss)/d(t) into ``t.grad`` for every reachable t requiring grad."""
    if not isinstance(loss, Tensor) or loss.data.size != 1:
        shape = getattr(loss, "shape", None)
        raise ContractError(f"backward() needs a scalar loss, got shape {shape}")
    if not loss.requires_grad:
        raise ContractError("loss does not depend on any tensor requiring grad")
    nodes = {}
    stack = [loss]
    while stack:
        t = stack.pop()
        if t.id in nodes:
            continue
        nodes[t.id] = t
        stack.extend(p for p in t.parents if p.requires_grad and p.id not in nodes)
    pending = {loss.id: np.ones_like(loss.data)}
    for tid in sorted(nodes, reverse=True):
        t = nodes[tid]
        g = pending.pop(tid, None)
        if g is None:
            g = np.zeros_like(t.data)
        if t.backward_fn is None:
            t.grad = g.copy() if t.grad is None else t.grad + g
            continue
        # Gradient arrays are never mutated in place, so interior nodes may alias.
        t.grad = g if t.grad is None else t.grad + g
        for parent, pg in zip(t.parents, t.backward_fn(g)):
            if pg is None or not parent.requires_grad:
                continue
            if parent.id in pending:
                pending[parent.id] = pending[parent.id] + pg
            else:
                pending[parent.id] = pg


# ---------------------------------------------------------------- elementwise


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _broadcast_shape(a, b):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"cannot broadcast shapes {a.shape} and {b.shape}") from None


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b)
    return record(a.data + b.data, (a, b),
                  lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)), "add")


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b)
    return record(a.data - b.data, (a, b),
                  lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)), "sub")


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b)
    return record(a.data * b.data, (a, b),
                  lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
                  "mul")


def div(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b)
    out = a.data / b.data

    def bw(g):
        gb = -g * out / b.data
        return _unbroadcast(g / b.data, a.shape), _unbroadcast(gb, b.shape)

    return record(out, (a, b), bw, "div")


def neg(a):
    return record(-a.data, (a,), lambda g: (-g,), "neg")


def power(a, exponent):
    """Elementwise ``a ** exponent`` for a fixed scalar exponent."""
    exponent = float(exponent)
    if exponent == 0.0:
        return record(np.ones_like(a.data), (a,), lambda g: (np.zeros_like(g),), "pow")
    out = a.data ** exponent
    return record(out, (a,), lambda g: (g * exponent * a.data ** (exponent - 1.0),), "pow")


def exp(a):
    out = np.exp(a.data)
    return record(out, (a,), lambda g: (g * out,), "exp")


def log(a):
    return record(np.log(a.data), (a,), lambda g: (g / a.data,), "log")


def relu(a):
    mask = a.data > 0
    # Subgradient at exactly 0 is taken as 0.
    return record(np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,), "relu")


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(a):
    """Tanh-approximated GELU."""
    x = a.data
    x2 = x * x
    inner = _GELU_C * x * (1.0 + 0.044715 * x2)
    th = np.tanh(inner)
    out = 0.5 * x * (1.0 + th)

    def bw(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * x2)
        return (g * (0.5 * (1.0 + th) + 0.5 * x * (1.0 - th ** 2) * dinner),)

    return record(out, (a,), bw, "gelu")


def _stable_sigmoid(x):
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(a):
    out = _stable_sigmoid(a.data)
    return record(out, (a,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def softplus(a):
    """log(1 + e^x) without overflow."""
    x = a.data
    out = np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))
    return record(out, (a,), lambda g: (g * _stable_sigmoid(x),), "softplus")


def tanh(a):
    out = np.tanh(a.data)
    return record(out, (a,), lambda g: (g * (1.0 - out ** 2),), "tanh")


def softmax(a, axis=-1):
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return record(out, (a,), bw, "softmax")


def layernorm(a, axis=-1, eps=1e-5):
    """Normalize to zero mean / unit variance along ``axis`` (no affine part)."""
    x = a.data
    mu = x.mean(axis=axis, keepdims=True)
    xc = x - mu
    var = (xc ** 2).mean(axis=axis, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv

    def bw(g):
        gm = g.mean(axis=axis, keepdims=True)
        gx = (g * xhat).mean(axis=axis, keepdims=True)
        return (inv * (g - gm - xhat * gx),)

    return record(xhat, (a,), bw, "layernorm")


# ------------------------------------------------------------------ reductions


def _norm_axis(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(ax % ndim for ax in axis)


def tsum(a, axis=None, keepdims=False):
    axes = _norm_axis(axis, a.ndim)
    out = a.data.sum(axis=axes, keepdims=keepdims)

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, a.shape).copy(),)

    return record(np.asarray(out, dtype=np.float64), (a,), bw, "sum")


def mean(a, axis=None, keepdims=False):
    axes = _norm_axis(axis, a.ndim)
    count = 1
    for ax in axes:
        count *= a.shape[ax]
    out = a.data.sum(axis=axes, keepdims=keepdims) / count

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g / count, a.shape).copy(),)

    return record(np.asarray(out, dtype=np.float64), (a,), bw, "mean")


# -------------------------------------------------------------- shape algebra


def reshape(a, shape):
    shape = tuple(shape)
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise DimensionError(f"cannot reshape {a.shape} into {shape}") from None
    return record(out, (a,), lambda g: (g.reshape(a.shape),), "reshape")


def transpose(a, axes=None):
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    axes = tuple(axes)
    if sorted(axes) != list(range(a.ndim)):
        raise DimensionError(f"invalid permutation {axes} for shape {a.shape}")
    inverse = tuple(np.argsort(axes))
    return record(np.ascontiguousarray(a.data.transpose(axes)), (a,),
                  lambda g: (g.transpose(inverse),), "transpose")


def swapaxes(a, i, j):
    axes = list(range(a.ndim))
    axes[i], axes[j] = axes[j], axes[i]
    return transpose(a, axes)


def getitem(a, index):
    out = a.data[index]
    if out.size == 0:
        raise DimensionError(f"index {index!r} selects nothing from shape {a.shape}")

    def bw(g):
        full = np.zeros_like(a.data)
        np.add.at(full, index, g)
        return (full,)

    return record(np.array(out, dtype=np.float64), (a,), bw, "slice")


def concat(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    ref = tensors[0].shape
    ax = axis % len(ref)
    for t in tensors[1:]:
        if len(t.shape) != len(ref) or any(
                s != r for i, (s, r) in enumerate(zip(t.shape, ref)) if i != ax):
            raise DimensionError(f"cannot concatenate shapes {ref} and {t.shape} on axis {axis}")
    out = np.concatenate([t.data for t in tensors], axis=ax)
    bounds = np.cumsum([t.shape[ax] for t in tensors])[:-1]

    def bw(g):
        return tuple(np.split(g, bounds, axis=ax))

    return record(out, tuple(tensors), bw, "concat")


# ------------------------------------------------------------- linear algebra


def matmul(a, b):
    """Matrix product over the last two axes; leading axes broadcast."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    try:
        out = a.data @ b.data
    except ValueError:
        raise DimensionError(f"matmul shape mismatch: {a.shape} @ {b.shape}") from None

    def bw(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return record(out, (a, b), bw, "matmul")


def conv2d(x, w, bias=None, stride=1, padding=0):
    """2-D cross-correlation of (N, C, H, W) input with (O, C, kh, kw) kernels."""
    x, w = as_tensor(x), as_tensor(w)
    if x.ndim != 4 or w.ndim != 4 or x.shape[1] != w.shape[1]:
        raise DimensionError(f"conv2d shape mismatch: input {x.shape}, weight {w.shape}")
    n, c, h, wd = x.shape
    o, _, kh, kw = w.shape
    hp, wp = h + 2 * padding, wd + 2 * padding
    if kh > hp or kw > wp:
        raise DimensionError(f"kernel {kh}x{kw} larger than padded input {hp}x{wp}")
    ho = (hp - kh) // stride + 1
    wo = (wp - kw) // stride + 1
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.data
    cols = kernels.im2col(np.ascontiguousarray(xp), kh, kw, stride)
    wmat = w.data.reshape(o, -1)
    out = cols @ wmat.T  # (N, Ho*Wo, O)
    if bias is not None:
        out = out + bias.data
    out = np.ascontiguousarray(out.transpose(0, 2, 1)).reshape(n, o, ho, wo)

    def bw(g):
        gm = g.reshape(n, o, ho * wo).transpose(0, 2, 1)  # (N, Ho*Wo, O)
        gx = gw = gbias = None
        if x.requires_grad:
            gcols = gm @ wmat
            gxp = kernels.col2im(gcols, (n, c, hp, wp), kh, kw, stride, ho, wo)
            gx = gxp[:, :, padding:padding + h, padding:padding + wd] if padding else gxp
        if w.requires_grad:
            gw = (gm.reshape(-1, o).T @ cols.reshape(-1, cols.shape[-1])).reshape(w.shape)
        if bias is not None and bias.requires_grad:
            gbias = gm.sum(axis=(0, 1))
        return gx, gw, gbias

    parents = (x, w) if bias is None else (x, w, bias)
    return record(out, parents, bw, "conv2d")


def _interp_matrix(n_in, n_out):
    """Bilinear weights (half-pixel centres, edge clamped) as an (n_out, n_in) matrix."""
    m = np.zeros((n_out, n_in))
    scale = n_in / n_out
    for i in range(n_out):
        src = max((i + 0.5) * scale - 0.5, 0.0)
        lo = min(int(math.floor(src)), n_in - 1)
        hi = min(lo + 1, n_in - 1)
        frac = src - lo
        m[i, lo] += 1.0 - frac
        m[i, hi] += frac
    return m


def upsample_bilinear(x, size):
    """Resize the two trailing axes of (N, C, H, W) to ``size`` bilinearly."""
    ho, wo = size
    ah = _interp_matrix(x.shape[2], ho)
    aw = _interp_matrix(x.shape[3], wo)
    out = ah @ x.data @ aw.T
    return record(out, (x,), lambda g: (ah.T @ g @ aw,), "upsample")


# ------------------------------------------------------------- serialization

MAGIC = b"PTNS"
VERSION = 1


def save_tensor(t, path):
    """Write ``t`` as: b"PTNS", u32 version, u32 ndim, u32 extents, f64 payload (LE)."""
    arr = t.data if isinstance(t, Tensor) else np.asarray(t, dtype=np.float64)
    header = np.array([VERSION, arr.ndim, *arr.shape], dtype="<u4").tobytes()
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(header)
        fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def load_tensor(path, requires_grad=False):
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != MAGIC:
        raise ValueError(f"{path}: not a PTNS tensor file")
    version, ndim = np.frombuffer(blob, dtype="<u4", count=2, offset=4)
    if version != VERSION:
        raise ValueError(f"{path}: unsupported PTNS version {version}")
    shape = tuple(int(s) for s in np.frombuffer(blob, dtype="<u4", count=ndim, offset=12))
    offset = 12 + 4 * int(ndim)
    count = int(np.prod(shape)) if shape else 1
    if len(blob) != offset + 8 * count:
        raise ValueError(f"{path}: payload length does not match header {shape}")
    data = np.frombuffer(blob, dtype="<f8", count=count, offset=offset).astype(np.float64)
    t = Tensor(data.reshape(shape), requires_grad=requires_grad)
    return t
