"""Dense tensors with reverse-mode automatic differentiation.

Every op records a closure that maps the output gradient to input gradients.
Broadcasting is restricted to singleton axes of equal-rank operands (plus
0-d scalars), and operands must share a dtype; anything else raises
:class:`~mcgen.errors.ShapeError` / :class:`~mcgen.errors.DTypeError`.
"""
import contextlib

import numpy as np

from . import kernels
from .errors import BackwardError, DTypeError, ShapeError, UninitializedStatsError, UnknownKernelError

DTYPES = {"f32": np.dtype(np.float32), "f64": np.dtype(np.float64)}
_default_dtype = DTYPES["f32"]
_grad_enabled = True


def as_dtype(dtype):
    if isinstance(dtype, str):
        try:
            return DTYPES[dtype]
        except KeyError:
            raise DTypeError(f"unknown dtype {dtype!r}; use 'f32' or 'f64'") from None
    dt = np.dtype(dtype)
    if dt not in DTYPES.values():
        raise DTypeError(f"unsupported dtype {dt}")
    return dt


def dtype_name(dtype):
    return "f64" if np.dtype(dtype) == DTYPES["f64"] else "f32"


def get_default_dtype():
    return _default_dtype


def set_default_dtype(dtype):
    global _default_dtype
    _default_dtype = as_dtype(dtype)


@contextlib.contextmanager
def default_dtype(dtype):
    prev = _default_dtype
    set_default_dtype(dtype)
    try:
        yield
    finally:
        set_default_dtype(prev)


@contextlib.contextmanager
def no_grad():
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "op", "name")
    __array_priority__ = 1000

    def __init__(self, data, requires_grad=False, dtype=None, name=None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data)
        if dtype is not None:
            dt = as_dtype(dtype)
        elif arr.dtype in (np.float32, np.float64):
            dt = arr.dtype
        else:
            dt = _default_dtype
        self.data = np.asarray(arr, dtype=dt, order="C")
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = ()
        self._backward = None
        self.op = None
        self.name = name

    # -- introspection ----------------------------------------------------
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

    def numpy(self):
        return self.data

    def item(self):
        return self.data.item()

    def detach(self):
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={dtype_name(self.dtype)}{flag})"

    def __len__(self):
        return self.data.shape[0]

    # -- autodiff ---------------------------------------------------------
    def backward(self, grad=None):
        """Accumulate d(self)/d(leaf) into ``leaf.grad`` for every leaf requiring grad.

        Calling twice without :meth:`zero_grad` on the leaves adds the gradients.
        """
        if not self.requires_grad:
            raise BackwardError("loss is detached: no input requires grad")
        if grad is None:
            if self.data.size != 1:
                raise BackwardError(f"backward needs a scalar loss, got shape {self.shape}")
            grad = np.ones_like(self.data)
        order = _topological_order(self)
        grads = {id(self): np.asarray(grad, dtype=self.dtype)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                grads[key] = pg if key not in grads else grads[key] + pg

    # -- operators --------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(_lift(other, self), self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_lift(other, self), self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(_lift(other, self), self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(_lift(other, self), self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, exponent):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return index_select(self, index)

    def sum(self, axis=None, keepdims=False):
        return sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes or None)

    @property
    def T(self):
        return transpose(self)

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)

    def relu(self):
        return relu(self)

    def tanh(self):
        return tanh(self)

    def sigmoid(self):
        return sigmoid(self)


def _topological_order(root):
    order = []
    seen = set()
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
            if id(p) not in seen:
                stack.append((p, False))
    return order


def _result(data, parents, backward, op):
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.name = None
    out.op = op
    track = _grad_enabled and any(p.requires_grad for p in parents)
    out.requires_grad = track
    out._parents = tuple(parents) if track else ()
    out._backward = backward if track else None
    return out


def _lift(value, like):
    if isinstance(value, Tensor):
        if value.dtype != like.dtype:
            raise DTypeError(f"dtype mismatch: {dtype_name(value.dtype)} vs {dtype_name(like.dtype)}")
        return value
    if isinstance(value, np.ndarray) and value.dtype in (np.float32, np.float64) and value.dtype != like.dtype:
        raise DTypeError(f"dtype mismatch: {value.dtype} array combined with {dtype_name(like.dtype)} tensor")
    return Tensor(np.asarray(value, dtype=like.dtype))


def _pair(a, b):
    if not isinstance(a, Tensor):
        if not isinstance(b, Tensor):
            raise TypeError("at least one operand must be a Tensor")
        a = _lift(a, b)
    b = _lift(b, a)
    return a, b


def broadcast_shape(a, b):
    if a == b:
        return a
    if len(a) == 0:
        return b
    if len(b) == 0:
        return a
    if len(a) != len(b):
        raise ShapeError(f"rank mismatch {a} vs {b}: broadcast only along singleton axes of equal rank")
    out = []
    for x, y in zip(a, b):
        if x == y or y == 1:
            out.append(x)
        elif x == 1:
            out.append(y)
        else:
            raise ShapeError(f"shapes {a} and {b} are not broadcast-compatible")
    return tuple(out)


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    if len(shape) == 0:
        return np.asarray(g.sum(), dtype=g.dtype)
    axes = tuple(i for i, (s, gs) in enumerate(zip(shape, g.shape)) if s == 1 and gs != 1)
    return g.sum(axis=axes, keepdims=True)


# -- elementwise -------------------------------------------------------------

def add(a, b):
    a, b = _pair(a, b)
    broadcast_shape(a.shape, b.shape)
    sa, sb = a.shape, b.shape
    return _result(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)), "add")


def sub(a, b):
    a, b = _pair(a, b)
    broadcast_shape(a.shape, b.shape)
    sa, sb = a.shape, b.shape
    return _result(a.data - b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)), "sub")


def mul(a, b):
    a, b = _pair(a, b)
    broadcast_shape(a.shape, b.shape)
    ad, bd = a.data, b.data

    def backward(g):
        return _unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)

    return _result(ad * bd, (a, b), backward, "mul")


def div(a, b):
    a, b = _pair(a, b)
    broadcast_shape(a.shape, b.shape)
    ad, bd = a.data, b.data
    out = ad / bd

    def backward(g):
        return _unbroadcast(g / bd, ad.shape), _unbroadcast(-g * out / bd, bd.shape)

    return _result(out, (a, b), backward, "div")


def neg(a):
    return _result(-a.data, (a,), lambda g: (-g,), "neg")


def power(a, exponent):
    if isinstance(exponent, Tensor):
        raise TypeError("power supports scalar exponents only")
    p = float(exponent)
    ad = a.data
    out = ad ** a.dtype.type(p)
    return _result(out, (a,), lambda g: (g * a.dtype.type(p) * ad ** a.dtype.type(p - 1),), "pow")


def exp(a):
    out = np.exp(a.data)
    return _result(out, (a,), lambda g: (g * out,), "exp")


def log(a):
    ad = a.data
    return _result(np.log(ad), (a,), lambda g: (g / ad,), "log")


def relu(a):
    ad = a.data
    pos = ad > 0
    return _result(np.where(pos, ad, a.dtype.type(0)), (a,), lambda g: (g * pos,), "relu")


def tanh(a):
    out = np.tanh(a.data)
    return _result(out, (a,), lambda g: (g * (1 - out * out),), "tanh")


def sigmoid(a):
    with np.errstate(over="ignore"):
        out = 1 / (1 + np.exp(-a.data))
    return _result(out, (a,), lambda g: (g * out * (1 - out),), "sigmoid")


def clip(a, lo, hi):
    ad = a.data
    inside = (ad >= lo) & (ad <= hi)
    out = np.clip(ad, a.dtype.type(lo), a.dtype.type(hi))
    return _result(out, (a,), lambda g: (g * inside,), "clip")


# -- linear algebra and shape ------------------------------------------------

def matmul(a, b):
    a, b = _pair(a, b)
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul expects 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data
    return _result(ad @ bd, (a, b), lambda g: (g @ bd.T, ad.T @ g), "matmul")


def transpose(a, axes=None):
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    axes = tuple(axes)
    if sorted(axes) != list(range(a.ndim)):
        raise ShapeError(f"invalid permutation {axes} for rank {a.ndim}")
    inverse = tuple(np.argsort(axes))
    out = np.ascontiguousarray(a.data.transpose(axes))
    return _result(out, (a,), lambda g: (np.ascontiguousarray(g.transpose(inverse)),), "transpose")


def reshape(a, shape):
    shape = tuple(int(s) for s in shape)
    src = a.shape
    try:
        out = a.data.reshape(shape)
    except ValueError as exc:
        raise ShapeError(str(exc)) from None
    return _result(out, (a,), lambda g: (g.reshape(src),), "reshape")


def concat(tensors, axis=0):
    tensors = list(tensors)
    if not tensors:
        raise ShapeError("concat of an empty sequence")
    first = tensors[0]
    tensors = [first] + [_lift(t, first) for t in tensors[1:]]
    ax = axis % first.ndim
    for t in tensors[1:]:
        if t.ndim != first.ndim or any(s != f for i, (s, f) in enumerate(zip(t.shape, first.shape)) if i != ax):
            raise ShapeError(f"concat along axis {axis}: incompatible shapes {first.shape} and {t.shape}")
    sizes = np.cumsum([t.shape[ax] for t in tensors])[:-1]
    out = np.concatenate([t.data for t in tensors], axis=ax)
    return _result(out, tensors, lambda g: tuple(np.split(g, sizes, axis=ax)), "concat")


def _is_basic_index(index):
    items = index if isinstance(index, tuple) else (index,)
    return all(isinstance(i, (int, np.integer, slice)) or i is None or i is Ellipsis for i in items)


def index_select(a, index):
    """Slicing; basic indices scatter by assignment, advanced ones by ``np.add.at``."""
    ad = a.data
    out = ad[index]
    basic = _is_basic_index(index)

    def backward(g):
        full = np.zeros_like(ad)
        if basic:
            full[index] = g
        else:
            np.add.at(full, index, g)
        return (full,)

    return _result(np.ascontiguousarray(out), (a,), backward, "slice")


def slice_axis(a, axis, start, stop):
    index = [slice(None)] * a.ndim
    index[axis] = slice(start, stop)
    return index_select(a, tuple(index))


def sum(a, axis=None, keepdims=False):  # noqa: A001 - mirrors numpy naming
    shape = a.shape
    out = np.asarray(a.data.sum(axis=axis, keepdims=keepdims), dtype=a.dtype)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.ascontiguousarray(np.broadcast_to(g, shape)),)

    return _result(out, (a,), backward, "sum")


def mean(a, axis=None, keepdims=False):
    if axis is None:
        count = a.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        count = int(np.prod([a.shape[i] for i in axes]))
    return sum(a, axis, keepdims) * a.dtype.type(1.0 / count)


def softmax(a, axis=-1):
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _result(out, (a,), backward, "softmax")


def log_softmax(a, axis=-1):
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse

    def backward(g):
        return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)

    return _result(out, (a,), backward, "log_softmax")


# -- convolution and pooling -------------------------------------------------

def _check_4d(x, what):
    if x.ndim != 4:
        raise ShapeError(f"{what} expects an N×C×H×W input, got shape {x.shape}")


def conv2d(x, w, b=None, stride=1, pad=0):
    """Cross-correlation via im2col; ``w`` is out×in×kh×kw."""
    _check_4d(x, "conv2d")
    w = _lift(w, x)
    if w.ndim != 4 or w.shape[1] != x.shape[1]:
        raise ShapeError(f"conv2d weight {w.shape} does not match input channels {x.shape[1]}")
    n = x.shape[0]
    o, _, kh, kw = w.shape
    cols = kernels.im2col(x.data, kh, kw, stride, pad)
    oh = kernels.conv_out_size(x.shape[2], kh, stride, pad)
    ow = kernels.conv_out_size(x.shape[3], kw, stride, pad)
    wm = w.data.reshape(o, -1)
    out = cols @ wm.T
    parents = [x, w]
    if b is not None:
        b = _lift(b, x)
        if b.shape != (o,):
            raise ShapeError(f"conv2d bias {b.shape} does not match {o} output channels")
        out += b.data
        parents.append(b)
    y = np.ascontiguousarray(out.reshape(n, oh, ow, o).transpose(0, 3, 1, 2))
    xshape = x.shape

    def backward(g):
        gm = g.transpose(0, 2, 3, 1).reshape(n * oh * ow, o)
        gx = kernels.col2im(gm @ wm, xshape, kh, kw, stride, pad) if x.requires_grad else None
        gw = (gm.T @ cols).reshape(w.shape) if w.requires_grad else None
        if b is None:
            return gx, gw
        return gx, gw, gm.sum(axis=0)

    return _result(y, parents, backward, "conv2d")


def conv_transpose2d(x, w, b=None, stride=1, pad=0):
    """Adjoint of :func:`conv2d`; ``w`` is in×out×kh×kw."""
    _check_4d(x, "conv_transpose2d")
    w = _lift(w, x)
    if w.ndim != 4 or w.shape[0] != x.shape[1]:
        raise ShapeError(f"conv_transpose2d weight {w.shape} does not match input channels {x.shape[1]}")
    n, cin, h, wd = x.shape
    _, cout, kh, kw = w.shape
    oh = (h - 1) * stride - 2 * pad + kh
    ow = (wd - 1) * stride - 2 * pad + kw
    if oh < 1 or ow < 1:
        raise ShapeError("conv_transpose2d output would be empty")
    xm = x.data.transpose(0, 2, 3, 1).reshape(n * h * wd, cin)
    wm = w.data.reshape(cin, cout * kh * kw)
    out_shape = (n, cout, oh, ow)
    y = kernels.col2im(xm @ wm, out_shape, kh, kw, stride, pad)
    parents = [x, w]
    if b is not None:
        b = _lift(b, x)
        if b.shape != (cout,):
            raise ShapeError(f"conv_transpose2d bias {b.shape} does not match {cout} output channels")
        y += b.data.reshape(1, cout, 1, 1)
        parents.append(b)

    def backward(g):
        gcols = kernels.im2col(g, kh, kw, stride, pad)
        gx = np.ascontiguousarray((gcols @ wm.T).reshape(n, h, wd, cin).transpose(0, 3, 1, 2)) if x.requires_grad else None
        gw = (xm.T @ gcols).reshape(w.shape) if w.requires_grad else None
        if b is None:
            return gx, gw
        return gx, gw, g.sum(axis=(0, 2, 3))

    return _result(y, parents, backward, "conv_transpose2d")


def _pool_cols(x, k, stride):
    n, c, h, w = x.shape
    cols = kernels.im2col(x.data.reshape(n * c, 1, h, w), k, k, stride, 0)
    oh = kernels.conv_out_size(h, k, stride, 0)
    ow = kernels.conv_out_size(w, k, stride, 0)
    return cols, (n, c, oh, ow)


def max_pool2d(x, k=2, stride=None):
    _check_4d(x, "max_pool2d")
    stride = stride or k
    cols, oshape = _pool_cols(x, k, stride)
    idx = cols.argmax(axis=1)
    rows = np.arange(cols.shape[0])
    y = cols[rows, idx].reshape(oshape)
    n, c, h, w = x.shape

    def backward(g):
        gcols = np.zeros_like(cols)
        gcols[rows, idx] = g.ravel()
        return (kernels.col2im(gcols, (n * c, 1, h, w), k, k, stride, 0).reshape(x.shape),)

    return _result(y, (x,), backward, "max_pool2d")


def avg_pool2d(x, k=2, stride=None):
    _check_4d(x, "avg_pool2d")
    stride = stride or k
    cols, oshape = _pool_cols(x, k, stride)
    scale = x.dtype.type(1.0 / (k * k))
    y = (cols.sum(axis=1) * scale).reshape(oshape)
    n, c, h, w = x.shape

    def backward(g):
        gcols = np.repeat(g.reshape(-1, 1) * scale, k * k, axis=1)
        return (kernels.col2im(gcols, (n * c, 1, h, w), k, k, stride, 0).reshape(x.shape),)

    return _result(y, (x,), backward, "avg_pool2d")


def global_sum_pool(x):
    _check_4d(x, "global_sum_pool")
    return sum(x, axis=(2, 3))


def upsample_nearest2x(x):
    _check_4d(x, "nearest_upsample")
    n, c, h, w = x.shape
    y = np.repeat(np.repeat(x.data, 2, axis=2), 2, axis=3)
    return _result(y, (x,), lambda g: (g.reshape(n, c, h, 2, w, 2).sum(axis=(3, 5)),), "nearest_upsample")


# -- normalization -----------------------------------------------------------

class BatchNormStats:
    """Running statistics owned by one batch-norm layer (mutated in place)."""

    def __init__(self, channels, dtype=None, momentum=0.1, eps=1e-5):
        dt = as_dtype(dtype) if dtype is not None else _default_dtype
        self.mean = np.zeros(channels, dtype=dt)
        self.var = np.ones(channels, dtype=dt)
        self.count = np.zeros((), dtype=dt)
        self.momentum = momentum
        self.eps = eps


def batch_norm(x, gamma, beta, stats, training):
    """Per-channel normalization over batch (and spatial) axes.

    Train mode normalizes with biased batch variance and folds the batch
    mean and unbiased variance into ``stats`` with ``stats.momentum``.
    """
    if x.ndim not in (2, 4):
        raise ShapeError(f"batch_norm expects N×C or N×C×H×W, got {x.shape}")
    c = x.shape[1]
    if stats.mean.shape != (c,):
        raise ShapeError(f"batch_norm stats for {stats.mean.shape[0]} channels, input has {c}")
    axes = (0,) if x.ndim == 2 else (0, 2, 3)
    bshape = (1, c) if x.ndim == 2 else (1, c, 1, 1)
    xd = x.data
    dt = x.dtype.type
    m = xd.size // c
    if training:
        mu = xd.mean(axis=axes, keepdims=True)
        centered = xd - mu
        var = (centered * centered).mean(axis=axes, keepdims=True)
        mom = dt(stats.momentum)
        unbiased = var * dt(m / (m - 1)) if m > 1 else var
        stats.mean[...] = (1 - mom) * stats.mean + mom * mu.reshape(c)
        stats.var[...] = (1 - mom) * stats.var + mom * unbiased.reshape(c)
        stats.count += 1
    else:
        if stats.count == 0:
            raise UninitializedStatsError("batch_norm evaluated before any training step")
        mu = stats.mean.reshape(bshape)
        var = stats.var.reshape(bshape)
        centered = xd - mu
    invstd = 1 / np.sqrt(var + dt(stats.eps))
    xhat = centered * invstd
    parents = [x]
    y = xhat
    if gamma is not None:
        gamma, beta = _lift(gamma, x), _lift(beta, x)
        y = xhat * gamma.data.reshape(bshape) + beta.data.reshape(bshape)
        parents += [gamma, beta]

    def backward(g):
        gxhat = g * gamma.data.reshape(bshape) if gamma is not None else g
        if training:
            s1 = gxhat.sum(axis=axes, keepdims=True)
            s2 = (gxhat * xhat).sum(axis=axes, keepdims=True)
            gx = invstd / dt(m) * (dt(m) * gxhat - s1 - xhat * s2)
        else:
            gx = gxhat * invstd
        if gamma is None:
            return (gx,)
        return gx, (g * xhat).sum(axis=axes), g.sum(axis=axes)

    return _result(y, parents, backward, "batch_norm")


# -- kernel registry ---------------------------------------------------------

KERNELS = {
    "matmul": matmul,
    "conv2d": conv2d,
    "conv_transpose2d": conv_transpose2d,
    "batch_norm": batch_norm,
    "relu": relu,
    "tanh": tanh,
    "sigmoid": sigmoid,
    "add": add,
    "sub": sub,
    "mul": mul,
    "div": div,
    "exp": exp,
    "log": log,
    "max_pool2d": max_pool2d,
    "avg_pool2d": avg_pool2d,
    "global_sum_pool": global_sum_pool,
    "nearest_upsample": upsample_nearest2x,
    "reshape": reshape,
    "concat": lambda *ts, axis=0: concat(ts, axis),
    "slice": slice_axis,
    "sum": sum,
    "mean": mean,
    "softmax": softmax,
    "log_softmax": log_softmax,
    "transpose": transpose,
    "clip": clip,
}


def kernel_set(inputs, op, **attrs):
    """Dispatch a kernel by id, e.g. ``kernel_set([x, w], "conv2d", stride=2, pad=1)``."""
    try:
        fn = KERNELS[op]
    except KeyError:
        raise UnknownKernelError(f"unknown kernel {op!r}") from None
    return fn(*inputs, **attrs)
