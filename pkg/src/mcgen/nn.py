"""Parametric layers and the module tree used by every model."""
import numpy as np

from . import tensor as T
from .errors import DegenerateWeightError, ShapeError
from .tensor import Tensor

INIT_STD = 0.02


class Module:
    """Tree of parameters, buffers and codebooks discovered from attributes.

    Parameters are ``Tensor`` attributes with ``requires_grad``; buffers are
    numpy arrays listed in ``_buffer_names``; children are ``Module``
    attributes or lists of modules. Traversal follows attribute insertion
    order, so names are stable across runs.
    """

    training = True
    _buffer_names = ()

    def children(self):
        for name, value in vars(self).items():
            if name.startswith("_"):
                continue
            if isinstance(value, Module):
                yield name, value
            elif isinstance(value, (list, tuple)) and value and all(isinstance(v, Module) for v in value):
                for i, v in enumerate(value):
                    yield f"{name}.{i}", v

    def named_parameters(self, prefix=""):
        for name, value in vars(self).items():
            if isinstance(value, Tensor) and value.requires_grad and not name.startswith("_"):
                yield prefix + name, value
        for name, child in self.children():
            yield from child.named_parameters(f"{prefix}{name}.")

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def named_buffers(self, prefix=""):
        for name in self._buffer_names:
            yield prefix + name, self._get_buffer(name)
        for name, child in self.children():
            yield from child.named_buffers(f"{prefix}{name}.")

    def _get_buffer(self, name):
        obj = self
        for part in name.split("."):
            obj = getattr(obj, part)
        return obj

    def named_modules(self, prefix=""):
        yield prefix.rstrip("."), self
        for name, child in self.children():
            yield from child.named_modules(f"{prefix}{name}.")

    def num_parameters(self):
        return int(sum(p.size for p in self.parameters()))

    def train(self, mode=True):
        for _, m in self.named_modules():
            m.training = mode
        return self

    def eval(self):
        return self.train(False)

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


def _param(data, dtype):
    return Tensor(data, requires_grad=True, dtype=dtype)


def _init(stream, shape, dtype):
    return _param(stream.normal(shape) * INIT_STD, dtype)


class Linear(Module):
    def __init__(self, in_features, out_features, stream, bias=True, dtype=None, spectral=False):
        dtype = T.as_dtype(dtype or T.get_default_dtype())
        self.in_features, self.out_features = in_features, out_features
        self.weight = _init(stream, (out_features, in_features), dtype)
        self.bias = _param(np.zeros(out_features), dtype) if bias else None
        self.sn = SpectralNorm(out_features, in_features, stream.child("sn"), dtype) if spectral else None

    @property
    def out_channels(self):
        return self.out_features

    def effective_weight(self):
        return self.sn(self.weight, self.training) if self.sn is not None else self.weight

    def forward(self, x):
        if x.ndim != 2 or x.shape[1] != self.in_features:
            raise ShapeError(f"Linear({self.in_features}, {self.out_features}) got input {x.shape}")
        y = T.matmul(x, T.transpose(self.effective_weight()))
        return y + T.reshape(self.bias, (1, -1)) if self.bias is not None else y


class Conv2d(Module):
    def __init__(self, in_ch, out_ch, k, stride, pad, stream, bias=True, dtype=None, spectral=False):
        dtype = T.as_dtype(dtype or T.get_default_dtype())
        self.in_ch, self.out_ch, self.k, self.stride, self.pad = in_ch, out_ch, k, stride, pad
        self.weight = _init(stream, (out_ch, in_ch, k, k), dtype)
        self.bias = _param(np.zeros(out_ch), dtype) if bias else None
        self.sn = SpectralNorm(out_ch, in_ch * k * k, stream.child("sn"), dtype) if spectral else None

    @property
    def out_channels(self):
        return self.out_ch

    def effective_weight(self):
        return self.sn(self.weight, self.training) if self.sn is not None else self.weight

    def forward(self, x):
        return T.conv2d(x, self.effective_weight(), self.bias, self.stride, self.pad)


class ConvTranspose2d(Module):
    def __init__(self, in_ch, out_ch, k, stride, pad, stream, bias=True, dtype=None):
        dtype = T.as_dtype(dtype or T.get_default_dtype())
        self.in_ch, self.out_ch, self.k, self.stride, self.pad = in_ch, out_ch, k, stride, pad
        self.weight = _init(stream, (in_ch, out_ch, k, k), dtype)
        self.bias = _param(np.zeros(out_ch), dtype) if bias else None

    @property
    def out_channels(self):
        return self.out_ch

    def forward(self, x):
        return T.conv_transpose2d(x, self.weight, self.bias, self.stride, self.pad)


class BatchNorm(Module):
    _buffer_names = ("stats.mean", "stats.var", "stats.count")

    def __init__(self, channels, dtype=None, momentum=0.1, eps=1e-5, affine=True):
        dtype = T.as_dtype(dtype or T.get_default_dtype())
        self.gamma = _param(np.ones(channels), dtype) if affine else None
        self.beta = _param(np.zeros(channels), dtype) if affine else None
        self.stats = T.BatchNormStats(channels, dtype, momentum, eps)

    def forward(self, x):
        return T.batch_norm(x, self.gamma, self.beta, self.stats, self.training)


def _unit(v):
    n = np.linalg.norm(v)
    return v / n if n > 0 else v


class SpectralNorm(Module):
    """Persistent power-iteration state for one weight (u: out, v: in·kh·kw)."""

    _buffer_names = ("u", "v")

    def __init__(self, rows, cols, stream, dtype=None, iters=1):
        dtype = T.as_dtype(dtype or T.get_default_dtype())
        self.u = _unit(stream.normal(rows)).astype(dtype)
        self.v = _unit(stream.normal(cols)).astype(dtype)
        self.iters = iters

    def __call__(self, weight, training=True):
        return spectral_normalize(weight, self.iters if training else 0, self.u, self.v)


def spectral_normalize(weight, iters, u, v=None):
    """Return ``weight / sigma`` with sigma the power-iteration estimate of ||W||_2.

    ``u`` (and ``v`` when given) are updated in place. Gradient flows through
    ``sigma = u^T W v`` with u and v held fixed. ``iters=0`` reuses the stored
    vectors without iterating (evaluation).
    """
    w2 = T.reshape(weight, (weight.shape[0], -1))
    wd = w2.data
    if v is None:
        v = np.zeros(wd.shape[1], dtype=wd.dtype)
        if iters < 1:
            raise ValueError("spectral_normalize needs iters >= 1 without a stored v")
    if u.shape != (wd.shape[0],) or v.shape != (wd.shape[1],):
        raise ShapeError(f"power-iteration state {u.shape}/{v.shape} does not match weight {wd.shape}")
    if not np.any(wd):
        raise DegenerateWeightError("spectral norm of an all-zero weight")
    for _ in range(iters):
        v[...] = _unit(wd.T @ u)
        u[...] = _unit(wd @ v)
    sigma = T.sum(T.matmul(T.matmul(Tensor(u.reshape(1, -1)), w2), Tensor(v.reshape(-1, 1))))
    if not sigma.data > 0:
        raise DegenerateWeightError(f"spectral norm estimate is {float(sigma.data)}")
    return weight / sigma


ACTIVATIONS = {
    "relu": T.relu,
    "tanh": T.tanh,
    "sigmoid": T.sigmoid,
    "none": lambda x: x,
    None: lambda x: x,
}


def flatten(x):
    return T.reshape(x, (x.shape[0], -1))
