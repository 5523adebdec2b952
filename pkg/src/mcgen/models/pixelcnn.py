"""MCPixelCNN: a masked-convolution stack of gated units, MC on the tanh branch."""
import numpy as np

from .. import tensor as T
from ..errors import ShapeError
from ..nn import Conv2d, Module
from ..tensor import Tensor
from .base import ConditionalModel


def causal_mask(out_ch, in_ch, k, mask_type):
    """Raster-order kernel mask; type 'A' also hides the centre tap."""
    if mask_type not in ("A", "B"):
        raise ShapeError(f"mask type must be 'A' or 'B', got {mask_type!r}")
    if k % 2 == 0:
        raise ShapeError("causal kernels need an odd size")
    m = np.ones((out_ch, in_ch, k, k))
    c = k // 2
    m[:, :, c, c + (mask_type == "B") :] = 0
    m[:, :, c + 1 :, :] = 0
    return m


class MaskedConv2d(Conv2d):
    def __init__(self, in_ch, out_ch, k, mask_type, stream, dtype=None):
        super().__init__(in_ch, out_ch, k, 1, k // 2, stream, dtype=dtype)
        self.mask_type = mask_type
        self.mask = causal_mask(out_ch, in_ch, k, mask_type).astype(self.weight.dtype)

    def effective_weight(self):
        return self.weight * Tensor(self.mask)


class McGatedBlock(Module):
    """``(tanh(W_f * x) ⊙ (h × e)) ⊙ σ(W_g * x)``, plus an unmasked 1×1 residual for type B."""

    def __init__(self, in_ch, features, k, mask_type, controller, stream, dtype=None):
        self.conv_f = MaskedConv2d(in_ch, features, k, mask_type, stream.child("f"), dtype)
        self.conv_g = MaskedConv2d(in_ch, features, k, mask_type, stream.child("g"), dtype)
        self.controller = controller
        self.residual = mask_type == "B" and in_ch == features
        self.proj = Conv2d(features, features, 1, 1, 0, stream.child("proj"), dtype=dtype) if self.residual else None

    def forward(self, x, h=None):
        f = T.tanh(self.conv_f(x))
        if self.controller is not None:
            f = self.controller(f, h)
        y = f * T.sigmoid(self.conv_g(x))
        if self.residual:
            y = x + self.proj(y)
        return y


def gated_forward(block, x, h):
    return block(x, h)


class McPixelCNN(ConditionalModel):
    """Autoregressive categorical model over ``levels`` intensities per pixel."""

    model_id = "mcpixelcnn"
    family = "nll"
    nll_is_bound = False

    def __init__(self, num_modes, conditioning="mc", in_ch=1, size=8, levels=256, features=16, layers=4, seed=0, dtype=None):
        if in_ch != 1:
            raise ValueError("this PixelCNN models single-channel images")
        if conditioning == "embed":
            raise ValueError("embedding baselines are not provided for PixelCNN")
        self._setup(num_modes, conditioning, seed, dtype, dict(in_ch=in_ch, size=size, levels=levels, features=features, layers=layers))
        self.in_ch, self.size, self.levels = in_ch, size, levels
        dt = self.dtype
        self.blocks = [
            McGatedBlock(
                in_ch if i == 0 else features,
                features,
                5 if i == 0 else 3,
                "A" if i == 0 else "B",
                self.ctrl(features, f"gated{i}"),
                self.init_stream(f"gated{i}"),
                dt,
            )
            for i in range(layers)
        ]
        self.head = Conv2d(features, features, 1, 1, 0, self.init_stream("head"), dtype=dt)
        self.logits = Conv2d(features, levels, 1, 1, 0, self.init_stream("logits"), dtype=dt)

    def _scale(self, x_int):
        return Tensor((np.asarray(x_int, dtype=np.float64) / (self.levels - 1) * 2 - 1).astype(self.dtype))

    def features(self, x, h):
        for block in self.blocks:
            x = block(x, h)
        return x

    def forward(self, x, h):
        """Per-pixel logits N×levels×H×W for inputs already scaled to [-1, 1]."""
        y = self.features(x, h)
        return self.logits(T.relu(self.head(T.relu(y))))

    def nll_tensor(self, x_int, h):
        x_int = np.asarray(x_int)
        logp = T.log_softmax(self(self._scale(x_int), h), axis=1)
        n, _, hh, ww = logp.shape
        onehot = np.zeros(logp.shape, dtype=self.dtype)
        idx = x_int.reshape(n, hh, ww).astype(np.int64)
        onehot[np.arange(n)[:, None, None], idx, np.arange(hh)[None, :, None], np.arange(ww)[None, None, :]] = 1
        return -T.sum(T.reshape(logp * Tensor(onehot), (n, -1)), axis=1)

    def losses(self, x_int, h, stream=None):
        nll = T.mean(self.nll_tensor(x_int, h))
        return {"loss": nll, "nll": nll}

    def nll(self, x_int, h, stream=None):
        with T.no_grad():
            return self.nll_tensor(x_int, h).data.astype(np.float64)

    def generate(self, h, stream, as_levels=False):
        h = self.check_h(h)
        n = h.shape[0]
        x = np.zeros((n, 1, self.size, self.size), dtype=np.int64)
        with T.no_grad():
            for i in range(self.size):
                for j in range(self.size):
                    logits = self(self._scale(x), h).data[:, :, i, j].astype(np.float64)
                    p = np.exp(logits - logits.max(axis=1, keepdims=True))
                    p /= p.sum(axis=1, keepdims=True)
                    u = stream.uniform(n)
                    x[:, 0, i, j] = np.minimum((np.cumsum(p, axis=1) < u[:, None]).sum(axis=1), self.levels - 1)
        if as_levels:
            return x
        return (x / (self.levels - 1)).astype(self.dtype)
