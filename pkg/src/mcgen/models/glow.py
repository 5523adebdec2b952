"""MCGlow: squeeze + a stack of affine couplings whose s/t network carries the controllers."""
import math

import numpy as np

from .. import tensor as T
from ..errors import NonFiniteError, ShapeError
from ..mc import McLayer
from ..nn import Conv2d, Module
from ..tensor import Tensor
from .base import ConditionalModel

LOG_2PI = math.log(2 * math.pi)


def squeeze2x(x):
    """N×C×H×W -> N×4C×H/2×W/2 (space to depth)."""
    n, c, h, w = x.shape
    y = T.reshape(x, (n, c, h // 2, 2, w // 2, 2))
    return T.reshape(T.transpose(y, (0, 1, 3, 5, 2, 4)), (n, c * 4, h // 2, w // 2))


def unsqueeze2x(x):
    n, c, h, w = x.shape
    y = T.reshape(x, (n, c // 4, 2, 2, h, w))
    return T.reshape(T.transpose(y, (0, 1, 4, 2, 5, 3)), (n, c // 4, h * 2, w * 2))


class McCoupling(Module):
    """Affine coupling: one half passes through, the other is scaled and shifted.

    ``y_b = x_b * exp(s) + t`` with ``s = tanh(raw_s)``, ``(raw_s, t) = NN(x_a; h)``.
    ``flip`` swaps which half conditions the other. The final conv of NN
    starts at zero, so a fresh coupling is the identity.
    """

    def __init__(self, channels, hidden, flip, make_ctrl, stream, dtype=None):
        if channels % 2:
            raise ShapeError("coupling needs an even channel count")
        self.half = channels // 2
        self.flip = bool(flip)
        self.nn_in = McLayer(Conv2d(self.half, hidden, 3, 1, 1, stream.child("in"), dtype=dtype), None, "relu", make_ctrl(hidden, "in"))
        self.nn_mid = McLayer(Conv2d(hidden, hidden, 1, 1, 0, stream.child("mid"), dtype=dtype), None, "relu", make_ctrl(hidden, "mid"))
        self.nn_out = Conv2d(hidden, 2 * self.half, 3, 1, 1, stream.child("out"), dtype=dtype)
        self.nn_out.weight.data[...] = 0

    def _split(self, x):
        if x.ndim != 4 or x.shape[1] != 2 * self.half:
            raise ShapeError(f"coupling expects {2 * self.half} channels, got shape {x.shape}")
        a = T.slice_axis(x, 1, 0, self.half)
        b = T.slice_axis(x, 1, self.half, 2 * self.half)
        return (b, a) if self.flip else (a, b)

    def _join(self, a, b):
        return T.concat([b, a] if self.flip else [a, b], axis=1)

    def scale_shift(self, a, h):
        raw = self.nn_out(self.nn_mid(self.nn_in(a, h), h))
        s = T.tanh(T.slice_axis(raw, 1, 0, self.half))
        t = T.slice_axis(raw, 1, self.half, 2 * self.half)
        if not (np.all(np.isfinite(s.data)) and np.all(np.isfinite(t.data))):
            raise NonFiniteError("coupling scale/shift overflowed")
        return s, t

    def forward(self, x, h):
        a, b = self._split(x)
        s, t = self.scale_shift(a, h)
        y_b = b * T.exp(s) + t
        log_det = T.sum(T.reshape(s, (s.shape[0], -1)), axis=1)
        return self._join(a, y_b), log_det

    def inverse(self, y, h):
        a, y_b = self._split(y)
        s, t = self.scale_shift(a, h)
        return self._join(a, (y_b - t) * T.exp(-s))


def coupling_forward(unit, x, h):
    return unit(x, h)


def coupling_inverse(unit, y, h):
    return unit.inverse(y, h)


class McGlow(ConditionalModel):
    """Single-level flow over dequantized images with a standard normal prior."""

    model_id = "mcglow"
    family = "nll"
    nll_is_bound = False

    def __init__(self, num_modes, conditioning="mc", in_ch=1, size=8, levels=256, hidden=16, depth=4, seed=0, dtype=None):
        if conditioning == "embed":
            raise ValueError("embedding baselines are not provided for Glow")
        if size % 2:
            raise ValueError("image size must be even")
        self._setup(num_modes, conditioning, seed, dtype, dict(in_ch=in_ch, size=size, levels=levels, hidden=hidden, depth=depth))
        self.in_ch, self.size, self.levels = in_ch, size, levels
        channels = 4 * in_ch
        self.couplings = []
        for i in range(depth):
            def make_ctrl(width, name, i=i):
                return self.ctrl(width, f"coupling{i}.{name}")

            self.couplings.append(McCoupling(channels, hidden, i % 2 == 1, make_ctrl, self.init_stream(f"coupling{i}"), self.dtype))

    def flow(self, x, h):
        """Image-shaped input -> (latent, summed log-det per sample)."""
        z = squeeze2x(x)
        total = None
        for unit in self.couplings:
            z, ld = unit(z, h)
            total = ld if total is None else total + ld
        return z, total

    def inverse(self, z, h):
        for unit in reversed(self.couplings):
            z = unit.inverse(z, h)
        return unsqueeze2x(z)

    def dequantize(self, x_int, stream):
        x_int = np.asarray(x_int, dtype=np.float64)
        u = stream.uniform(x_int.shape)
        return Tensor(((x_int + u) / self.levels - 0.5).astype(self.dtype))

    def log_prob(self, x, h):
        """Continuous log-density per sample of centred inputs in [-0.5, 0.5)."""
        z, log_det = self.flow(x, h)
        flat = T.reshape(z, (z.shape[0], -1))
        dims = flat.shape[1]
        log_pz = T.sum(flat * flat, axis=1) * self.dtype.type(-0.5) - self.dtype.type(0.5 * dims * LOG_2PI)
        return log_pz + log_det

    def nll_tensor(self, x_int, h, stream):
        x = self.dequantize(x_int, stream)
        dims = int(np.prod(x.shape[1:]))
        return -self.log_prob(x, h) + self.dtype.type(dims * math.log(self.levels))

    def losses(self, x_int, h, stream):
        nll = T.mean(self.nll_tensor(x_int, h, stream))
        return {"loss": nll, "nll": nll}

    def nll(self, x_int, h, stream):
        """Discrete NLL in nats per sample; NaN where the flow overflowed."""
        out = np.full(len(x_int), np.nan)
        with T.no_grad():
            for i in range(len(x_int)):
                try:
                    out[i] = float(self.nll_tensor(x_int[i : i + 1], h[i : i + 1], stream).data[0])
                except NonFiniteError:
                    pass
        return out

    def generate(self, h, stream, temperature=1.0):
        h = self.check_h(h)
        c = 4 * self.in_ch
        s = self.size // 2
        z = stream.normal((h.shape[0], c, s, s)) * temperature
        with T.no_grad():
            x = self.inverse(Tensor(z.astype(self.dtype)), h).data
        return np.clip(x + 0.5, 0.0, 1.0).astype(self.dtype)
