import copy

import numpy as np

from .. import tensor as T
from ..codebook import check_selector, one_hot
from ..errors import SelectorError
from ..mc import CONDITIONING, MultimodalController, make_controller
from ..nn import Module, _param
from ..rng import Stream
from ..tensor import Tensor

EMBED_DIM = 32


class ConditionalModel(Module):
    """Base for models conditioned on a mode selector ``h`` (N×C).

    Subclasses call :meth:`_setup` first, build layers through :meth:`ctrl`,
    and record constructor arguments in ``self.config`` so a checkpoint can
    rebuild them.
    """

    model_id = None
    family = None

    def _setup(self, num_modes, conditioning, seed, dtype, config):
        if conditioning not in CONDITIONING:
            raise ValueError(f"unknown conditioning {conditioning!r}")
        if num_modes < 1:
            raise ValueError("need at least one mode")
        self.num_modes = num_modes
        self.conditioning = conditioning
        self.dtype = T.as_dtype(dtype or T.get_default_dtype())
        self.config = dict(config, num_modes=num_modes, conditioning=conditioning, seed=seed, dtype=T.dtype_name(self.dtype))
        self._init_stream = Stream(seed, "init")
        self._book_stream = Stream(seed, "codebook")

    def init_stream(self, name):
        return self._init_stream.child(name)

    def ctrl(self, width, layer_id, conditioning=None):
        return make_controller(width, self.num_modes, self._book_stream, layer_id, conditioning or self.conditioning)

    def make_embedding(self, name="embedding"):
        return _param(self.init_stream(name).normal((self.num_modes, EMBED_DIM)), self.dtype)

    def controllers(self):
        return [(name, m) for name, m in self.named_modules() if isinstance(m, MultimodalController)]

    def codebooks(self):
        return {m.book.layer_id: m.book for _, m in self.controllers()}

    def check_h(self, h, simplex=False):
        h = np.asarray(h)
        if simplex:
            if h.ndim != 2 or h.shape[1] != self.num_modes:
                raise SelectorError(f"mode weights must be N×{self.num_modes}")
            if np.any(h < 0) or not np.allclose(h.sum(axis=1), 1.0):
                raise SelectorError("mode weights must be non-negative and sum to 1")
            return h
        return check_selector(h, self.num_modes)

    def embed(self, table, h):
        """Mode-weighted embedding rows ``h × table`` (N×E)."""
        return T.matmul(Tensor(np.asarray(h, dtype=self.dtype)), table)

    def with_codebooks(self, books):
        """A view sharing every parameter and buffer but using ``books`` (layer id -> Codebook)."""
        memo = {id(p): p for p in self.parameters()}
        for _, buf in self.named_buffers():
            memo[id(buf)] = buf
        for _, m in self.named_modules():
            if hasattr(m, "stats"):
                memo[id(m.stats)] = m.stats
        view = copy.deepcopy(self, memo)
        for _, ctrl in view.controllers():
            lid = ctrl.book.layer_id
            if lid in books:
                ctrl.book = books[lid]
        return view


def spatial_embedding(emb, height, width):
    """Broadcast N×E embeddings to N×E×H×W feature maps."""
    n, e = emb.shape
    ones = Tensor(np.ones((1, 1, height, width), dtype=emb.dtype))
    return T.reshape(emb, (n, e, 1, 1)) * ones


def mode_major_selector(modes, n_per_mode, num_modes):
    modes = [int(m) for m in modes]
    for m in modes:
        if not 0 <= m < num_modes:
            raise SelectorError(f"unknown mode id {m}; model has {num_modes} modes")
    labels = np.repeat(np.asarray(modes, dtype=np.int64), n_per_mode)
    return labels, one_hot(labels, num_modes)


def sample(model, modes, n_per_mode, stream):
    """Generate ``n_per_mode`` images for each mode, mode-major, values in [0, 1]."""
    labels, h = mode_major_selector(modes, n_per_mode, model.num_modes)
    return model.generate(h, stream), labels
