"""The multimodal controller: per-mode channel masks on layer outputs.

A controller multiplies a representation by ``h × e`` (the codeword rows of
the selected modes), broadcasting over spatial axes for conv features. A
wrapped layer computes linear op -> batch norm -> activation -> mask, so the
mask always comes last and batch-norm statistics see unmasked values.
"""
import numpy as np

from . import tensor as T
from .codebook import Codebook, sample_codebook, select_masks
from .errors import SelectorError, ShapeError
from .nn import ACTIVATIONS, Conv2d, ConvTranspose2d, Linear, Module
from .tensor import Tensor

# how a model conditions on the mode: sampled books, all-ones books (reduces
# to the backbone), no controllers at all, or learned embeddings (baseline)
CONDITIONING = ("mc", "ones", "none", "embed")


class MultimodalController(Module):
    """Nonparametric mask over the channel axis (axis 1) of its input."""

    def __init__(self, book):
        self.book = book

    @property
    def width(self):
        return self.book.width

    def forward(self, x, h):
        masks = select_masks(self.book, h)
        n, d = masks.shape
        if x.shape[0] != n:
            raise ShapeError(f"selector has {n} rows for a batch of {x.shape[0]}")
        if x.ndim < 2 or x.shape[1] != d:
            raise ShapeError(f"codeword width {d} does not match {x.shape[1] if x.ndim > 1 else None} channels")
        m = masks.astype(x.dtype).reshape((n, d) + (1,) * (x.ndim - 2))
        return x * Tensor(m)


def make_controller(width, num_modes, stream, layer_id, conditioning):
    """Controller for one layer, or None when the model carries no MC."""
    if conditioning == "mc":
        return MultimodalController(sample_codebook(num_modes, width, stream.child(layer_id), layer_id))
    if conditioning == "ones":
        return MultimodalController(Codebook.ones(num_modes, width, layer_id))
    if conditioning in ("none", "embed"):
        return None
    raise ValueError(f"unknown conditioning {conditioning!r}; expected one of {CONDITIONING}")


class McLayer(Module):
    """``mask(φ(BN(inner(x))))``; any of norm, activation, controller may be absent."""

    def __init__(self, inner, norm=None, activation="relu", controller=None):
        if activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {activation!r}")
        if controller is not None and controller.width != inner.out_channels:
            raise ShapeError(f"codebook width {controller.width} != {inner.out_channels} output channels")
        self.inner = inner
        self.norm = norm
        self.activation = activation
        self.controller = controller

    @property
    def book(self):
        return self.controller.book if self.controller is not None else None

    def forward(self, x, h=None):
        y = self.inner(x)
        if self.norm is not None:
            y = self.norm(y)
        y = ACTIVATIONS[self.activation](y)
        if self.controller is not None:
            y = self.controller(y, h)
        return y


def mc_forward(layer, x, h):
    return layer(x, h)


def _inner_weight(inner):
    if isinstance(inner, (Linear, Conv2d)):
        return inner.effective_weight()
    return inner.weight


def _out_axis(inner):
    # ConvTranspose2d stores in×out×kh×kw
    return 1 if isinstance(inner, ConvTranspose2d) else 0


def effective_subnetwork(layer, mode, prev_row=None):
    """Effective weight ``W ⊙ (e_c × ẽ_c)`` of one mode and its nonzero fraction.

    Without ``prev_row`` (no controller upstream) only output channels are masked.
    """
    book = layer.book
    if book is None:
        raise ValueError("layer carries no multimodal controller")
    if not 0 <= mode < book.num_modes:
        raise SelectorError(f"mode {mode} out of range for {book.num_modes} modes")
    w = _inner_weight(layer.inner).data
    out_ax = _out_axis(layer.inner)
    in_ax = 1 - out_ax
    e = book.rows[mode].astype(w.dtype)
    shape = [1] * w.ndim
    shape[out_ax] = e.size
    mask = e.reshape(shape)
    if prev_row is not None:
        prev = np.asarray(prev_row).astype(w.dtype)
        if prev.size != w.shape[in_ax]:
            raise ShapeError(f"previous codeword has {prev.size} bits, layer has {w.shape[in_ax]} input channels")
        shape = [1] * w.ndim
        shape[in_ax] = prev.size
        mask = mask * prev.reshape(shape)
    masked = w * mask
    return masked, np.count_nonzero(masked) / masked.size


def count_subnetworks(width):
    if width < 1:
        raise ValueError("width must be >= 1")
    return 1 << int(width)


def masked_sublayer_forward(layer, x, mode, batch_mean=None, batch_var=None):
    """Weight-masking reference for one mode: ``φ̂_c(BN̂_c(x Ŵ_cᵀ + b̂_c))``.

    Materializes ``Ŵ_c = W ⊙ e_c`` and ``b̂_c = b ⊙ e_c`` and masks the
    batch-norm output and the activation separately. Batch norm uses the
    given full-batch statistics (train mode) or the running statistics.
    This is the slow per-mode path the controller replaces; it exists as an
    oracle for equivalence checks.
    """
    inner = layer.inner
    e = layer.book.rows[mode].astype(x.dtype)
    out_ax = _out_axis(inner)
    w = _inner_weight(inner)
    shape = [1] * w.ndim
    shape[out_ax] = e.size
    w_hat = w * Tensor(e.reshape(shape))
    b_hat = inner.bias * Tensor(e) if inner.bias is not None else None
    if isinstance(inner, Linear):
        z = T.matmul(x, T.transpose(w_hat))
        if b_hat is not None:
            z = z + T.reshape(b_hat, (1, -1))
    elif isinstance(inner, Conv2d):
        z = T.conv2d(x, w_hat, b_hat, inner.stride, inner.pad)
    else:
        z = T.conv_transpose2d(x, w_hat, b_hat, inner.stride, inner.pad)
    bshape = (1, e.size) + (1,) * (z.ndim - 2)
    e_t = Tensor(e.reshape(bshape))
    if layer.norm is not None:
        norm = layer.norm
        if batch_mean is None:
            batch_mean, batch_var = norm.stats.mean, norm.stats.var
        mu = Tensor(np.asarray(batch_mean, dtype=x.dtype).reshape(bshape))
        inv = Tensor((1 / np.sqrt(np.asarray(batch_var, dtype=x.dtype) + x.dtype.type(norm.stats.eps))).reshape(bshape))
        z = (z - mu) * inv
        if norm.gamma is not None:
            z = z * T.reshape(norm.gamma, bshape) + T.reshape(norm.beta, bshape)
        z = z * e_t
    return ACTIVATIONS[layer.activation](z) * e_t
