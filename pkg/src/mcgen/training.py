"""Adam, run configuration, learning curves and the deterministic training loop."""
import contextlib
import dataclasses
import math
import os

import numpy as np

from . import tensor as T
from .codebook import one_hot
from .errors import DivergenceError, NonFiniteError
from .rng import Stream
from .tensor import Tensor
from .models.gan import hinge_d_loss, hinge_g_loss

LOSS_IDS = ("BCE", "NLL", "Hinge", "CE")

# model id -> (loss, lr, betas)
MODEL_DEFAULTS = {
    "mcvae": ("BCE", 3e-4, (0.9, 0.999)),
    "cvae": ("BCE", 3e-4, (0.9, 0.999)),
    "vae": ("BCE", 3e-4, (0.9, 0.999)),
    "mcmlpvae": ("BCE", 3e-4, (0.9, 0.999)),
    "mcgan": ("Hinge", 2e-4, (0.5, 0.999)),
    "gan": ("Hinge", 2e-4, (0.5, 0.999)),
    "cgan": ("Hinge", 2e-4, (0.0, 0.9)),
    "mcpixelcnn": ("NLL", 3e-4, (0.9, 0.999)),
    "mcglow": ("NLL", 3e-4, (0.9, 0.999)),
    "classifier": ("CE", 1e-3, (0.9, 0.999)),
}


# -- optimizer ----------------------------------------------------------------

def adam_step(params, grads, state, lr, betas, eps=1e-8, names=None):
    """One bias-corrected Adam update, in place.

    ``state`` holds ``t`` plus per-parameter ``m`` and ``v`` lists aligned
    with ``params``; it is created on first use. A ``None`` gradient leaves
    that parameter and its moments untouched.
    """
    b1, b2 = betas
    if not state:
        state.update(t=0, m=[np.zeros_like(p.data) for p in params], v=[np.zeros_like(p.data) for p in params])
    if len(state["m"]) != len(params):
        raise ValueError("optimizer state does not match the parameter list")
    for i, g in enumerate(grads):
        if g is not None and not np.all(np.isfinite(g)):
            name = names[i] if names else f"#{i}"
            raise NonFiniteError(f"non-finite gradient for parameter {name}", name)
    state["t"] += 1
    t = state["t"]
    c1 = 1 - b1**t
    c2 = 1 - b2**t
    for p, g, m, v in zip(params, grads, state["m"], state["v"]):
        if g is None:
            continue
        if m.shape != p.data.shape:
            raise ValueError(f"moment shape {m.shape} does not match parameter {p.data.shape}")
        dt = p.data.dtype.type
        m *= dt(b1)
        m += dt(1 - b1) * g
        v *= dt(b2)
        v += dt(1 - b2) * g * g
        p.data -= dt(lr) * (m / dt(c1)) / (np.sqrt(v / dt(c2)) + dt(eps))
    return params


class Adam:
    def __init__(self, named_params, lr, betas=(0.9, 0.999), eps=1e-8):
        named_params = list(named_params)
        self.names = [n for n, _ in named_params]
        self.params = [p for _, p in named_params]
        self.lr, self.betas, self.eps = lr, tuple(betas), eps
        self.state = {}

    def zero_grad(self):
        for p in self.params:
            p.grad = None

    def step(self):
        adam_step(self.params, [p.grad for p in self.params], self.state, self.lr, self.betas, self.eps, self.names)

    def state_arrays(self):
        """``{"t": ..., "m.<name>": ..., "v.<name>": ...}`` for persistence."""
        if not self.state:
            return {"t": 0}
        out = {"t": self.state["t"]}
        for name, m, v in zip(self.names, self.state["m"], self.state["v"]):
            out[f"m.{name}"] = m
            out[f"v.{name}"] = v
        return out

    def load_state_arrays(self, arrays):
        t = int(arrays["t"])
        if t == 0:
            self.state = {}
            return
        m, v = [], []
        for name, p in zip(self.names, self.params):
            m.append(np.array(arrays[f"m.{name}"], dtype=p.data.dtype))
            v.append(np.array(arrays[f"v.{name}"], dtype=p.data.dtype))
        self.state = {"t": t, "m": m, "v": v}


@contextlib.contextmanager
def frozen(params):
    """Temporarily stop gradients into ``params``."""
    saved = [p.requires_grad for p in params]
    for p in params:
        p.requires_grad = False
    try:
        yield
    finally:
        for p, s in zip(params, saved):
            p.requires_grad = s


# -- configuration ----------------------------------------------------------

def _parse_value(text):
    text = text.strip()
    for conv in (int, float):
        try:
            return conv(text)
        except ValueError:
            pass
    if "," in text:
        return tuple(_parse_value(t) for t in text.split(",") if t.strip())
    return text


def _format_value(value):
    if isinstance(value, (tuple, list)):
        return ",".join(_format_value(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


@dataclasses.dataclass
class TrainConfig:
    model_id: str = "mcvae"
    dataset_id: str = ""
    epochs: int = 10
    batch_size: int = 128
    lr: float = 3e-4
    betas: tuple = (0.9, 0.999)
    loss_id: str = "BCE"
    seed: int = 0
    dtype: str = "f32"
    ablate: str = ""
    model_args: dict = dataclasses.field(default_factory=dict)

    def __post_init__(self):
        self.betas = tuple(float(b) for b in self.betas)
        self.model_args = dict(self.model_args)
        self.validate()

    def validate(self):
        if self.model_id not in MODEL_DEFAULTS:
            raise ValueError(f"model_id: unknown model {self.model_id!r}")
        if int(self.batch_size) < 1:
            raise ValueError("batch_size: must be >= 1")
        if not self.lr > 0:
            raise ValueError("lr: must be > 0")
        if len(self.betas) != 2 or not all(0 <= b < 1 for b in self.betas):
            raise ValueError("betas: both must lie in [0, 1)")
        if self.loss_id not in LOSS_IDS:
            raise ValueError(f"loss_id: must be one of {LOSS_IDS}")
        if self.loss_id != MODEL_DEFAULTS[self.model_id][0]:
            raise ValueError(f"loss_id: {self.model_id} trains with {MODEL_DEFAULTS[self.model_id][0]}")
        if int(self.epochs) < 0:
            raise ValueError("epochs: must be >= 0")
        if self.dtype not in ("f32", "f64"):
            raise ValueError("dtype: must be f32 or f64")
        if self.ablate not in ("", "g", "d"):
            raise ValueError("ablate: must be empty, 'g' or 'd'")

    @classmethod
    def for_model(cls, model_id, **overrides):
        """Defaults for ``model_id`` (loss, lr, betas) with ``overrides`` applied."""
        if model_id not in MODEL_DEFAULTS:
            raise ValueError(f"model_id: unknown model {model_id!r}")
        loss_id, lr, betas = MODEL_DEFAULTS[model_id]
        base = dict(model_id=model_id, loss_id=loss_id, lr=lr, betas=betas)
        base.update(overrides)
        return cls(**base)

    def to_dict(self):
        d = {f.name: getattr(self, f.name) for f in dataclasses.fields(self) if f.name != "model_args"}
        for k, v in sorted(self.model_args.items()):
            d[f"model.{k}"] = v
        return d

    def to_text(self):
        return "".join(f"{k}={_format_value(v)}\n" for k, v in self.to_dict().items())

    @classmethod
    def from_mapping(cls, mapping):
        """Build from ``key -> value`` (strings allowed); per-model defaults fill gaps."""
        raw = {k: (_parse_value(v) if isinstance(v, str) else v) for k, v in mapping.items()}
        model_args = {k[6:]: v for k, v in raw.items() if k.startswith("model.")}
        fields = {f.name for f in dataclasses.fields(cls)}
        plain = {k: v for k, v in raw.items() if not k.startswith("model.")}
        unknown = set(plain) - fields
        if unknown:
            raise ValueError(f"{sorted(unknown)[0]}: unknown config key")
        if "dataset_id" in plain:
            plain["dataset_id"] = str(mapping["dataset_id"])
        for key in ("model_id", "loss_id", "dtype", "ablate"):
            if key in plain:
                plain[key] = "" if plain[key] is None else str(plain[key])
        if "betas" in plain and not isinstance(plain["betas"], tuple):
            raise ValueError("betas: expected two comma-separated numbers")
        for key in ("epochs", "batch_size", "seed"):
            if key in plain and not isinstance(plain[key], int):
                raise ValueError(f"{key}: expected an integer")
        return cls.for_model(plain.pop("model_id", "mcvae"), model_args=model_args, **plain)

    @classmethod
    def from_text(cls, text):
        return cls.from_mapping(parse_kv_lines(text))


def parse_kv_lines(text):
    """``key=value`` lines to a dict; blank lines and ``#`` comments skipped."""
    out = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ValueError(f"line {lineno}: expected key=value, got {line!r}")
        key, value = line.split("=", 1)
        out[key.strip()] = value.strip()
    return out


# -- learning curve ---------------------------------------------------------

class LearningCurve:
    """Per-epoch loss records with strictly increasing epoch numbers."""

    def __init__(self, records=None):
        self.records = []
        for epoch, values in records or ():
            self.append(epoch, values)

    def append(self, epoch, values):
        if self.records and epoch <= self.records[-1][0]:
            raise ValueError(f"epoch {epoch} does not follow {self.records[-1][0]}")
        self.records.append((int(epoch), dict(values)))

    def __len__(self):
        return len(self.records)

    def __eq__(self, other):
        return isinstance(other, LearningCurve) and self.records == other.records

    def losses(self, key="loss"):
        return [v[key] for _, v in self.records]

    def to_text(self):
        lines = []
        for epoch, values in self.records:
            parts = [f"epoch={epoch}"] + [f"{k}={v!r}" for k, v in values.items()]
            lines.append(" ".join(parts) + "\n")
        return "".join(lines)

    @classmethod
    def from_text(cls, text):
        curve = cls()
        for line in text.splitlines():
            if not line.strip():
                continue
            fields = dict(part.split("=", 1) for part in line.split())
            epoch = int(fields.pop("epoch"))
            curve.append(epoch, {k: float(v) for k, v in fields.items()})
        return curve


# -- training ----------------------------------------------------------------

def build_for_dataset(config, dataset):
    from .models import MODELS, build_model

    kwargs = dict(config.model_args)
    cls, _ = MODELS[config.model_id]
    if config.model_id == "mcmlpvae":
        kwargs.setdefault("in_dim", int(np.prod(dataset.images.shape[1:])))
    else:
        kwargs.setdefault("in_ch", dataset.images.shape[1])
        kwargs.setdefault("size", dataset.images.shape[2])
    if cls.__name__ == "McGan":
        kwargs.setdefault("ablate", config.ablate)
    return build_model(config.model_id, dataset.num_modes, seed=config.seed, dtype=config.dtype, **kwargs)


def as_levels(x, levels=256):
    """[0, 1] images to integer intensity levels."""
    return np.rint(np.asarray(x, dtype=np.float64) * (levels - 1)).astype(np.int64)


class Trainer:
    """Owns a model, its optimizers and the learning curve for one run.

    Batches mix modes freely. With ``sequential_modes`` every batch is split
    per mode, each part backpropagated separately with weight ``N_c / N``
    (gradients accumulate), then a single optimizer step is taken. That path
    only exists to check the mixed-batch one: without batch norm the two give
    the same update.
    """

    def __init__(self, config, dataset, model=None, sequential_modes=False):
        self.config = config
        self.dataset = dataset
        self.model = model if model is not None else build_for_dataset(config, dataset)
        self.sequential_modes = sequential_modes
        self.epoch = 0
        self.curve = LearningCurve()
        self.optimizers = self._make_optimizers()

    def _make_optimizers(self):
        c = self.config
        if self.model.family == "gan":
            return {
                "d": Adam(self.model.discriminator.named_parameters("discriminator."), c.lr, c.betas),
                "g": Adam(self.model.generator.named_parameters("generator."), c.lr, c.betas),
            }
        return {"model": Adam(self.model.named_parameters(), c.lr, c.betas)}

    # batches ------------------------------------------------------------
    def _inputs(self, idx):
        x = self.dataset.images[idx]
        labels = self.dataset.labels[idx]
        if self.model.family == "nll":
            x = as_levels(x, self.model.levels)
        elif self.model_id_flat():
            x = x.reshape(len(x), -1).astype(self.model.dtype)
        else:
            x = x.astype(self.model.dtype)
        return x, labels

    def model_id_flat(self):
        return getattr(self.model, "model_id", None) == "mcmlpvae"

    def batches(self, epoch):
        stream = Stream(self.config.seed, "epoch", epoch)
        order = self.dataset.train_idx[stream.child("order").permutation(len(self.dataset.train_idx))]
        bs = int(self.config.batch_size)
        for b, start in enumerate(range(0, len(order), bs)):
            yield b, order[start : start + bs], stream.child("batch", b)

    def _parts(self, labels):
        """(index array, weight) per backward pass of one batch."""
        n = len(labels)
        if not self.sequential_modes:
            return [(np.arange(n), 1.0)]
        return [(np.flatnonzero(labels == c), np.sum(labels == c) / n) for c in np.unique(labels)]

    # steps --------------------------------------------------------------
    def _loss(self, x, labels, stream):
        m = self.model
        if m.family == "classifier":
            return m.losses(x, labels)
        return m.losses(x, one_hot(labels, m.num_modes), stream)

    def _step_single(self, x, labels, stream):
        opt = self.optimizers["model"]
        opt.zero_grad()
        totals = {}
        for idx, weight in self._parts(labels):
            part_stream = stream if len(idx) == len(labels) else _BatchRows(stream, idx, len(labels))
            out = self._loss(x[idx], labels[idx], part_stream)
            _check_finite(out)
            loss = out["loss"] * self.model.dtype.type(weight) if weight != 1.0 else out["loss"]
            loss.backward()
            for k, v in out.items():
                totals[k] = totals.get(k, 0.0) + weight * float(v.data)
        opt.step()
        return totals

    def _step_gan(self, x, labels, stream):
        m = self.model
        d_opt, g_opt = self.optimizers["d"], self.optimizers["g"]
        h = one_hot(labels, m.num_modes)
        x_real = Tensor(x * 2 - 1)
        # discriminator on detached fakes
        d_opt.zero_grad()
        with T.no_grad():
            fake = m.generator(Tensor(stream.child("d").normal((len(x), m.latent_dim)).astype(m.dtype)), h)
        fake = Tensor(fake.data)
        d_loss = hinge_d_loss(m.discriminator(x_real, h), m.discriminator(fake, h))
        _check_finite({"d_loss": d_loss})
        d_loss.backward()
        d_opt.step()
        # generator through a frozen discriminator
        g_opt.zero_grad()
        z = Tensor(stream.child("g").normal((len(x), m.latent_dim)).astype(m.dtype))
        with frozen(d_opt.params):
            g_loss = hinge_g_loss(m.discriminator(m.generator(z, h), h))
            _check_finite({"g_loss": g_loss})
            g_loss.backward()
        g_opt.step()
        d, g = float(d_loss.data), float(g_loss.data)
        return {"loss": d + g, "d_loss": d, "g_loss": g}

    def train_epoch(self):
        epoch = self.epoch + 1
        self.model.train()
        sums, count = {}, 0
        for _, idx, stream in self.batches(epoch):
            x, labels = self._inputs(idx)
            if self.model.family == "gan":
                if self.sequential_modes:
                    raise ValueError("sequential_modes is not supported for adversarial training")
                vals = self._step_gan(x, labels, stream)
            else:
                vals = self._step_single(x, labels, stream)
            for k, v in vals.items():
                sums[k] = sums.get(k, 0.0) + v * len(idx)
            count += len(idx)
        self.epoch = epoch
        record = {k: v / max(count, 1) for k, v in sums.items()}
        self.curve.append(epoch, _ordered(record))
        return record

    def fit(self, epochs=None, checkpoint_path=None, log=None):
        """Train until ``epochs`` total epochs; save after each epoch when a path is given.

        A non-finite loss or gradient raises :class:`DivergenceError` naming
        the last checkpoint written (``None`` if none was).
        """
        target = self.config.epochs if epochs is None else epochs
        last_good = checkpoint_path if checkpoint_path and os.path.exists(checkpoint_path) else None
        if checkpoint_path and last_good is None:
            self.save(checkpoint_path)
            last_good = checkpoint_path
        while self.epoch < target:
            try:
                self.train_epoch()
            except NonFiniteError as exc:
                raise DivergenceError(f"training diverged in epoch {self.epoch + 1}: {exc}", self.epoch + 1, last_good) from exc
            if log is not None:
                log(self.curve.to_text().splitlines()[-1])
            if checkpoint_path:
                self.save(checkpoint_path)
                last_good = checkpoint_path
        return self

    def save(self, path):
        from .checkpoint import save_trainer

        save_trainer(self, path)

    @classmethod
    def resume(cls, path, dataset, sequential_modes=False):
        from .checkpoint import load_trainer

        return load_trainer(path, dataset, cls, sequential_modes=sequential_modes)


class _BatchRows:
    """Stream stand-in for one mode's slice of a batch.

    Replays the batch stream's draws at full batch size and keeps the rows
    of ``idx``, so every sample sees the same noise as in the mixed batch.
    """

    def __init__(self, stream, idx, n):
        self._source = Stream(stream.seed, *stream.key)
        self._idx, self._n = idx, n

    def _full(self, size):
        size = (size,) if isinstance(size, int) else tuple(size)
        return (self._n,) + size[1:]

    def normal(self, size, dtype=np.float64):
        return self._source.normal(self._full(size), dtype)[self._idx]

    def uniform(self, size, low=0.0, high=1.0, dtype=np.float64):
        return self._source.uniform(self._full(size), low, high, dtype)[self._idx]


def _ordered(record):
    keys = ["loss"] + sorted(k for k in record if k != "loss")
    return {k: record[k] for k in keys if k in record}


def _check_finite(values):
    for k, v in values.items():
        val = float(v.data) if isinstance(v, Tensor) else float(v)
        if not math.isfinite(val):
            raise NonFiniteError(f"non-finite {k}", k)


def train(config, dataset, checkpoint_path=None, resume=False, log=None, sequential_modes=False):
    """Run ``config`` on ``dataset``; returns the finished :class:`Trainer`."""
    if resume and checkpoint_path and os.path.exists(checkpoint_path):
        trainer = Trainer.resume(checkpoint_path, dataset, sequential_modes=sequential_modes)
        trainer.config = dataclasses.replace(trainer.config, epochs=config.epochs)
    else:
        trainer = Trainer(config, dataset, sequential_modes=sequential_modes)
    return trainer.fit(checkpoint_path=checkpoint_path, log=log)
