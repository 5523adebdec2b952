"""MCGAN: controllers after every hidden layer of both players; hinge loss.

``conditioning='embed'`` builds the CGAN baseline (each player owns an
embedding table concatenated at its first layer). ``ablate`` removes the
controllers from one player only.
"""
import numpy as np

from .. import tensor as T
from ..mc import McLayer
from ..nn import BatchNorm, Conv2d, ConvTranspose2d, Linear, Module
from ..tensor import Tensor
from .base import EMBED_DIM, ConditionalModel, spatial_embedding


class Generator(Module):
    """fc -> w0×s×s, then one stride-2 transposed conv per stage, then a 3×3 conv with tanh."""

    def __init__(self, owner, conditioning, in_ch, size, latent_dim, widths):
        dt = owner.dtype
        self.conditioning = conditioning
        self._owner = owner
        s = size // 2 ** (len(widths) - 1)
        self.start_shape = (widths[0], s, s)
        flat = widths[0] * s * s
        extra = EMBED_DIM if conditioning == "embed" else 0
        if conditioning == "embed":
            self.embedding = owner.make_embedding("g.embedding")
        self.fc = McLayer(
            Linear(latent_dim + extra, flat, owner.init_stream("g.fc"), dtype=dt),
            BatchNorm(flat, dt),
            "relu",
            owner.ctrl(flat, "g.fc", conditioning),
        )
        self.stages = []
        for i, (a, b) in enumerate(zip(widths[:-1], widths[1:])):
            name = f"g.up{i}"
            inner = ConvTranspose2d(a, b, 4, 2, 1, owner.init_stream(name), dtype=dt)
            self.stages.append(McLayer(inner, BatchNorm(b, dt), "relu", owner.ctrl(b, name, conditioning)))
        self.out = Conv2d(widths[-1], in_ch, 3, 1, 1, owner.init_stream("g.out"), dtype=dt)

    def forward(self, z, h):
        if self.conditioning == "embed":
            z = T.concat([z, self._owner.embed(self.embedding, h)], axis=1)
        y = self.fc(z, h)
        y = T.reshape(y, (y.shape[0],) + self.start_shape)
        for layer in self.stages:
            y = layer(y, h)
        return T.tanh(self.out(y))


class Discriminator(Module):
    """Spectral-normalized stride-2 4×4 convs, global sum pool, linear score."""

    def __init__(self, owner, conditioning, in_ch, widths):
        dt = owner.dtype
        self.conditioning = conditioning
        self._owner = owner
        extra = EMBED_DIM if conditioning == "embed" else 0
        if conditioning == "embed":
            self.embedding = owner.make_embedding("d.embedding")
        self.stages = []
        cin = in_ch + extra
        for i, w in enumerate(widths):
            name = f"d.down{i}"
            inner = Conv2d(cin, w, 4, 2, 1, owner.init_stream(name), dtype=dt, spectral=True)
            self.stages.append(McLayer(inner, None, "relu", owner.ctrl(w, name, conditioning)))
            cin = w
        self.head = Linear(widths[-1], 1, owner.init_stream("d.head"), dtype=dt, spectral=True)

    def forward(self, x, h):
        if self.conditioning == "embed":
            emb = self._owner.embed(self.embedding, h)
            x = T.concat([x, spatial_embedding(emb, x.shape[2], x.shape[3])], axis=1)
        for layer in self.stages:
            x = layer(x, h)
        return T.reshape(self.head(T.global_sum_pool(x)), (x.shape[0],))


def hinge_d_loss(real_scores, fake_scores):
    return T.mean(T.relu(1 - real_scores)) + T.mean(T.relu(1 + fake_scores))


def hinge_g_loss(fake_scores):
    return -T.mean(fake_scores)


class McGan(ConditionalModel):
    model_id = "mcgan"
    family = "gan"

    def __init__(
        self,
        num_modes,
        conditioning="mc",
        in_ch=1,
        size=16,
        latent_dim=32,
        g_widths=(64, 32, 16),
        d_widths=(16, 32, 64),
        ablate="",
        seed=0,
        dtype=None,
    ):
        if size % 2 ** (len(g_widths) - 1) or size < 2 ** (len(g_widths) - 1):
            raise ValueError("image size must be divisible by 2^(len(g_widths)-1)")
        if ablate not in ("", "g", "d"):
            raise ValueError("ablate must be '', 'g' or 'd'")
        g_widths = tuple(int(w) for w in g_widths)
        d_widths = tuple(int(w) for w in d_widths)
        self._setup(
            num_modes,
            conditioning,
            seed,
            dtype,
            dict(in_ch=in_ch, size=size, latent_dim=latent_dim, g_widths=g_widths, d_widths=d_widths, ablate=ablate),
        )
        self.in_ch, self.size, self.latent_dim = in_ch, size, latent_dim
        g_cond = "none" if ablate == "g" else conditioning
        d_cond = "none" if ablate == "d" else conditioning
        self.generator = Generator(self, g_cond, in_ch, size, latent_dim, g_widths)
        self.discriminator = Discriminator(self, d_cond, in_ch, d_widths)

    def generate(self, h, stream):
        h = self.check_h(h, simplex=self.conditioning == "embed")
        z = stream.normal((h.shape[0], self.latent_dim)).astype(self.dtype)
        was = self.training
        self.eval()
        try:
            with T.no_grad():
                out = self.generator(Tensor(z), h).data
        finally:
            self.train(was)
        return (out + 1) * self.dtype.type(0.5)

    def losses(self, x_real, h, stream):
        """Hinge losses for real images in [0, 1]; fakes are drawn for the same modes as the real batch."""
        x_real = x_real.data if isinstance(x_real, Tensor) else np.asarray(x_real, dtype=self.dtype)
        x_real = Tensor(x_real * self.dtype.type(2) - self.dtype.type(1))
        z = Tensor(stream.normal((x_real.shape[0], self.latent_dim)).astype(self.dtype))
        fake = self.generator(z, h)
        real_scores = self.discriminator(x_real, h)
        fake_scores = self.discriminator(fake, h)
        return {"d_loss": hinge_d_loss(real_scores, fake_scores), "g_loss": hinge_g_loss(fake_scores)}


def gan_losses(model, x_real, h, stream):
    out = model.losses(x_real, h, stream)
    return out["d_loss"], out["g_loss"]
