"""MCVAE (desk-scale conv encoder/decoder), a small MLP variant, and the CVAE baseline."""
import numpy as np

from .. import tensor as T
from ..mc import McLayer
from ..nn import BatchNorm, Conv2d, ConvTranspose2d, Linear, flatten
from ..tensor import Tensor
from .base import EMBED_DIM, ConditionalModel, spatial_embedding

BCE_EPS = 1e-6


def bce(probs, x):
    """Per-sample binary cross-entropy summed over dimensions (N,)."""
    xd = x.data if isinstance(x, Tensor) else np.asarray(x)
    if np.any(xd < 0) or np.any(xd > 1):
        raise ValueError("BCE targets must lie in [0, 1]")
    x = x if isinstance(x, Tensor) else Tensor(xd.astype(probs.dtype))
    p = T.clip(probs, BCE_EPS, 1 - BCE_EPS)
    ll = x * T.log(p) + (1 - x) * T.log(1 - p)
    return -T.sum(T.reshape(ll, (ll.shape[0], -1)), axis=1)


def gaussian_kl(mu, logvar):
    """KL(N(mu, exp(logvar)) || N(0, I)) per sample (N,)."""
    return T.sum(T.exp(logvar) + mu * mu - 1 - logvar, axis=1) * mu.dtype.type(0.5)


class _VaeMixin:
    family = "vae"

    def reparameterize(self, mu, logvar, eps):
        return mu + T.exp(logvar * self.dtype.type(0.5)) * Tensor(eps.astype(self.dtype))

    def forward(self, x, h, eps):
        mu, logvar = self.encode(x, h)
        z = self.reparameterize(mu, logvar, eps)
        return self.decode(z, h), mu, logvar

    def losses(self, x, h, stream):
        """Per-sample-averaged negative ELBO with its BCE and KL parts."""
        x = x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=self.dtype))
        eps = stream.normal((x.shape[0], self.latent_dim))
        probs, mu, logvar = self(x, h, eps)
        recon = T.mean(bce(probs, x))
        kl = T.mean(gaussian_kl(mu, logvar))
        return {"loss": recon + kl, "recon": recon, "kl": kl}

    def generate(self, h, stream):
        h = self.check_h(h, simplex=self.conditioning == "embed")
        z = stream.normal((h.shape[0], self.latent_dim)).astype(self.dtype)
        was = self.training
        self.eval()
        try:
            with T.no_grad():
                out = self.decode(Tensor(z), h).data
        finally:
            self.train(was)
        return out

    nll_is_bound = True

    def nll(self, x, h, stream, samples=1):
        """Negative ELBO per sample in nats (an upper bound on -log p(x)), eval mode."""
        x = Tensor(np.asarray(x, dtype=self.dtype))
        was = self.training
        self.eval()
        try:
            with T.no_grad():
                mu, logvar = self.encode(x, h)
                kl = gaussian_kl(mu, logvar).data.astype(np.float64)
                recon = np.zeros(x.shape[0])
                for _ in range(samples):
                    eps = stream.normal(mu.shape)
                    z = self.reparameterize(mu, logvar, eps)
                    recon += bce(self.decode(z, h), x).data
        finally:
            self.train(was)
        return recon / samples + kl


class McVae(_VaeMixin, ConditionalModel):
    """Conv VAE with a controller after every hidden layer and on the sampled latent.

    ``conditioning='embed'`` gives the CVAE baseline: one learned embedding
    table concatenated to the encoder input (as feature maps) and to the
    decoder input.
    """

    model_id = "mcvae"

    def __init__(self, num_modes, conditioning="mc", in_ch=1, size=16, latent_dim=32, widths=(16, 32, 64), seed=0, dtype=None):
        if size % 8 or size < 8:
            raise ValueError("image size must be a multiple of 8")
        widths = tuple(int(w) for w in widths)
        self._setup(num_modes, conditioning, seed, dtype, dict(in_ch=in_ch, size=size, latent_dim=latent_dim, widths=widths))
        self.in_ch, self.size, self.latent_dim = in_ch, size, latent_dim
        w0, w1, w2 = widths
        s = size // 8
        self.feat_shape = (w2, s, s)
        flat = w2 * s * s
        dt = self.dtype
        extra = EMBED_DIM if conditioning == "embed" else 0
        if conditioning == "embed":
            self.embedding = self.make_embedding()

        def conv_layer(name, cin, cout, k, stride, pad, transpose=False):
            cls = ConvTranspose2d if transpose else Conv2d
            inner = cls(cin, cout, k, stride, pad, self.init_stream(name), dtype=dt)
            return McLayer(inner, BatchNorm(cout, dt), "relu", self.ctrl(cout, name))

        self.encoder = [
            conv_layer("enc0", in_ch + extra, w0, 4, 2, 1),
            conv_layer("enc1", w0, w1, 4, 2, 1),
            conv_layer("enc2", w1, w2, 4, 2, 1),
            conv_layer("enc3", w2, w2, 3, 1, 1),
            conv_layer("enc4", w2, w2, 3, 1, 1),
        ]
        self.mu_head = Linear(flat, latent_dim, self.init_stream("mu"), dtype=dt)
        self.logvar_head = Linear(flat, latent_dim, self.init_stream("logvar"), dtype=dt)
        self.latent_ctrl = self.ctrl(latent_dim, "latent")
        self.dec_fc = McLayer(
            Linear(latent_dim + extra, flat, self.init_stream("dec_fc"), dtype=dt), BatchNorm(flat, dt), "relu", self.ctrl(flat, "dec_fc")
        )
        self.decoder = [
            conv_layer("dec0", w2, w2, 3, 1, 1),
            conv_layer("dec1", w2, w2, 3, 1, 1),
            conv_layer("dec2", w2, w1, 4, 2, 1, transpose=True),
            conv_layer("dec3", w1, w0, 4, 2, 1, transpose=True),
        ]
        self.out = ConvTranspose2d(w0, in_ch, 4, 2, 1, self.init_stream("out"), dtype=dt)

    def encode(self, x, h):
        if self.conditioning == "embed":
            emb = self.embed(self.embedding, h)
            x = T.concat([x, spatial_embedding(emb, x.shape[2], x.shape[3])], axis=1)
        for layer in self.encoder:
            x = layer(x, h)
        x = flatten(x)
        return self.mu_head(x), self.logvar_head(x)

    def decode(self, z, h):
        if self.latent_ctrl is not None:
            z = self.latent_ctrl(z, h)
        if self.conditioning == "embed":
            z = T.concat([z, self.embed(self.embedding, h)], axis=1)
        y = self.dec_fc(z, h)
        y = T.reshape(y, (y.shape[0],) + self.feat_shape)
        for layer in self.decoder:
            y = layer(y, h)
        return T.sigmoid(self.out(y))


class McMlpVae(_VaeMixin, ConditionalModel):
    """Fully connected MCVAE for flat inputs; small enough for exact-likelihood toys."""

    model_id = "mcmlpvae"

    def __init__(self, num_modes, in_dim, conditioning="mc", hidden=16, latent_dim=2, seed=0, dtype=None):
        self._setup(num_modes, conditioning, seed, dtype, dict(in_dim=in_dim, hidden=hidden, latent_dim=latent_dim))
        self.in_dim, self.latent_dim = in_dim, latent_dim
        dt = self.dtype
        extra = EMBED_DIM if conditioning == "embed" else 0
        if conditioning == "embed":
            self.embedding = self.make_embedding()
        self.enc = McLayer(Linear(in_dim + extra, hidden, self.init_stream("enc"), dtype=dt), None, "relu", self.ctrl(hidden, "enc"))
        self.mu_head = Linear(hidden, latent_dim, self.init_stream("mu"), dtype=dt)
        self.logvar_head = Linear(hidden, latent_dim, self.init_stream("logvar"), dtype=dt)
        self.latent_ctrl = self.ctrl(latent_dim, "latent")
        self.dec = McLayer(Linear(latent_dim + extra, hidden, self.init_stream("dec"), dtype=dt), None, "relu", self.ctrl(hidden, "dec"))
        self.out = Linear(hidden, in_dim, self.init_stream("out"), dtype=dt)

    def encode(self, x, h):
        if self.conditioning == "embed":
            x = T.concat([x, self.embed(self.embedding, h)], axis=1)
        y = self.enc(x, h)
        return self.mu_head(y), self.logvar_head(y)

    def decode(self, z, h):
        if self.latent_ctrl is not None:
            z = self.latent_ctrl(z, h)
        if self.conditioning == "embed":
            z = T.concat([z, self.embed(self.embedding, h)], axis=1)
        return T.sigmoid(self.out(self.dec(z, h)))
