"""Evaluation classifier: conv-pool ×3, conv, linear head; features are the flattened last conv."""
import numpy as np

from .. import tensor as T
from ..nn import Conv2d, Linear, flatten
from ..tensor import Tensor
from .base import ConditionalModel


class EvalClassifier(ConditionalModel):
    model_id = "classifier"
    family = "classifier"

    def __init__(self, num_modes, in_ch=1, size=16, widths=(8, 16, 32, 64), seed=0, dtype=None, conditioning="none"):
        widths = tuple(int(w) for w in widths)
        if not widths:
            raise ValueError("widths: need at least one conv layer")
        shrink = 2 ** (len(widths) - 1)
        if size % shrink:
            raise ValueError(f"image size must be a multiple of {shrink}")
        self._setup(num_modes, "none", seed, dtype, dict(in_ch=in_ch, size=size, widths=widths))
        dt = self.dtype
        chans = (in_ch,) + widths
        self.convs = [Conv2d(a, b, 3, 1, 1, self.init_stream(f"conv{i}"), dtype=dt) for i, (a, b) in enumerate(zip(chans[:-1], chans[1:]))]
        self.head = Linear(widths[-1] * (size // shrink) ** 2, num_modes, self.init_stream("head"), dtype=dt)
        self.in_ch, self.size = in_ch, size

    def _as_tensor(self, x):
        return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=self.dtype))

    def features(self, x):
        x = self._as_tensor(x)
        for i, conv in enumerate(self.convs):
            x = T.relu(conv(x))
            if i < len(self.convs) - 1:
                x = T.max_pool2d(x, 2)
        return flatten(x)

    def forward(self, x):
        return self.head(self.features(x))

    def losses(self, x, labels, stream=None):
        logp = T.log_softmax(self(x), axis=1)
        onehot = np.zeros(logp.shape, dtype=self.dtype)
        onehot[np.arange(len(labels)), labels] = 1
        ce = -T.mean(T.sum(logp * Tensor(onehot), axis=1))
        return {"loss": ce, "ce": ce}

    def predict(self, x, batch=512):
        """(probabilities N×C, features N×F) in float64, computed without a graph."""
        probs, feats = [], []
        with T.no_grad():
            for i in range(0, len(x), batch):
                f = self.features(x[i : i + batch])
                probs.append(T.softmax(self.head(f), axis=1).data.astype(np.float64))
                feats.append(f.data.astype(np.float64))
        return np.concatenate(probs), np.concatenate(feats)
