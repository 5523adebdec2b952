"""``mcgen`` command line: make-data, train, generate, create, eval, inspect-codebook.

Values resolve as flags over a ``--config`` file of ``key=value`` lines over
built-in defaults. Each run writes a manifest of ``key=value`` lines next to
its outputs; ``--replay manifest`` re-runs it with the recorded values.
Exit status: 0 success, 2 invalid arguments, 3 runtime failure.
"""
import argparse
import datetime
import os
import sys

import numpy as np

from . import __version__
from ._jit import limit_threads
from .errors import McgenError

MANIFEST_NAME = "run_manifest.txt"


class UsageError(ValueError):
    def __init__(self, flag, message):
        super().__init__(f"--{flag.replace('_', '-')}: {message}")
        self.flag = flag


# -- defaults per command -----------------------------------------------------

DEFAULTS = {
    "make-data": dict(modes=8, per_mode=500, size=16, regime="low", seed=0, out=None, variation=1, heldout=0.2),
    "train": dict(model="mcvae", data=None, epochs=10, seed=0, out=None, ablate_mc="", dtype="f32", batch_size=None, lr=None, betas=None),
    "generate": dict(ckpt=None, modes="all", n_per_mode=8, seed=0, out=None),
    "create": dict(ckpt=None, method=None, source=None, target=None, steps=8, num_new=8, n_per_mode=8, seed=0, out=None),
    "eval": dict(ckpt=None, data=None, metrics="is,fid,dbi", classifier=None, out=None, n_per_mode=100, seed=0, splits=10),
    "inspect-codebook": dict(ckpt=None, layer=None, out=None),
}
REQUIRED = {
    "make-data": ("out",),
    "train": ("data", "out"),
    "generate": ("ckpt", "out"),
    "create": ("ckpt", "method", "out"),
    "eval": ("ckpt", "data", "out"),
    "inspect-codebook": ("ckpt",),
}
INT_KEYS = {"modes", "per_mode", "size", "seed", "epochs", "n_per_mode", "steps", "num_new", "splits", "variation", "batch_size", "source", "target"}
FLOAT_KEYS = {"heldout", "lr"}


def build_parser():
    p = argparse.ArgumentParser(prog="mcgen", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"mcgen {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", help="key=value file; flags take precedence")
        sp.add_argument("--replay", help="re-run the command recorded in a run manifest")
        return sp

    s = common(sub.add_parser("make-data", help="write a synthetic multimodal dataset"))
    s.add_argument("--modes", type=int)
    s.add_argument("--per-mode", type=int)
    s.add_argument("--size", type=int)
    s.add_argument("--regime", choices=("low", "high"))
    s.add_argument("--variation", type=int, choices=(0, 1), help="0 renders every sample of a mode identically")
    s.add_argument("--heldout", type=float)
    s.add_argument("--seed", type=int)
    s.add_argument("--out")

    s = common(sub.add_parser("train", help="train a model on a dataset directory"))
    s.add_argument("--model")
    s.add_argument("--data")
    s.add_argument("--epochs", type=int)
    s.add_argument("--seed", type=int)
    s.add_argument("--out")
    s.add_argument("--ablate-mc", choices=("g", "d"))
    s.add_argument("--dtype", choices=("f32", "f64"))
    s.add_argument("--batch-size", type=int)
    s.add_argument("--lr", type=float)

    s = common(sub.add_parser("generate", help="sample a column-per-mode image grid"))
    s.add_argument("--ckpt")
    s.add_argument("--modes", help="comma-separated mode ids or 'all'")
    s.add_argument("--n-per-mode", type=int)
    s.add_argument("--seed", type=int)
    s.add_argument("--out")

    s = common(sub.add_parser("create", help="generate novel modalities"))
    s.add_argument("--ckpt")
    s.add_argument("--method", choices=("crossover", "resample", "dirichlet"))
    s.add_argument("--source", type=int)
    s.add_argument("--target", type=int)
    s.add_argument("--steps", type=int)
    s.add_argument("--num-new", type=int)
    s.add_argument("--n-per-mode", type=int)
    s.add_argument("--seed", type=int)
    s.add_argument("--out")

    s = common(sub.add_parser("eval", help="IS / FID / DBI / NLL report"))
    s.add_argument("--ckpt")
    s.add_argument("--data")
    s.add_argument("--metrics")
    s.add_argument("--classifier")
    s.add_argument("--n-per-mode", type=int)
    s.add_argument("--splits", type=int)
    s.add_argument("--seed", type=int)
    s.add_argument("--out")

    s = common(sub.add_parser("inspect-codebook", help="per-layer density and pairwise Hamming histogram"))
    s.add_argument("--ckpt")
    s.add_argument("--layer")
    s.add_argument("--out")
    return p


# -- resolution -------------------------------------------------------------

def _coerce(command, key, value):
    if value is None or not isinstance(value, str) or (command, key) == ("generate", "modes"):
        return value
    try:
        if key in INT_KEYS:
            return int(value)
        if key in FLOAT_KEYS:
            return float(value)
    except ValueError:
        raise UsageError(key, f"expected a number, got {value!r}") from None
    return value


def _read_kv(path, flag):
    from .training import parse_kv_lines

    try:
        with open(path) as f:
            return parse_kv_lines(f.read())
    except OSError as exc:
        raise UsageError(flag, f"cannot read {path}: {exc.strerror}") from None
    except ValueError as exc:
        raise UsageError(flag, str(exc)) from None


def resolve(args):
    """Merge defaults, config file (or replayed manifest) and explicit flags."""
    command = args.command
    values = dict(DEFAULTS[command])
    extra = {}
    layers = []
    if args.replay:
        manifest = _read_kv(args.replay, "replay")
        if manifest.get("command") != command:
            raise UsageError("replay", f"manifest records command {manifest.get('command')!r}, not {command!r}")
        layers.append({k[7:]: v for k, v in manifest.items() if k.startswith("config.")})
    if args.config:
        layers.append(_read_kv(args.config, "config"))
    for layer in layers:
        for key, value in layer.items():
            key = key.replace("-", "_")
            if key in values:
                values[key] = None if value == "" and DEFAULTS[command][key] is None else value
            elif command == "train":
                extra[key] = value
            else:
                raise UsageError("config", f"unknown key {key!r} for {command}")
    for key in values:
        flag_value = getattr(args, key, None)
        if flag_value is not None:
            values[key] = flag_value
    values = {k: _coerce(command, k, v) for k, v in values.items()}
    for key in REQUIRED[command]:
        if values.get(key) in (None, ""):
            raise UsageError(key, "is required")
    return values, extra


# -- manifest -----------------------------------------------------------------

def _now():
    return datetime.datetime.now(datetime.timezone.utc).isoformat(timespec="seconds")


def write_manifest(path, command, config, artifacts, started, info=None):
    from .training import _format_value

    lines = [f"command={command}", f"engine_version={__version__}", f"seed={config.get('seed', '')}"]
    lines += [f"config.{k}={'' if v is None else _format_value(v)}" for k, v in sorted(config.items())]
    lines += [f"info.{k}={v}" for k, v in sorted((info or {}).items())]
    lines += [f"artifact.{i}={a}" for i, a in enumerate(sorted(artifacts))]
    lines += [f"start={started}", f"end={_now()}"]
    with open(path, "w") as f:
        f.write("".join(line + "\n" for line in lines))


def _manifest_for_file(out):
    return f"{out}.manifest"


def _ensure_dir(path):
    if path:
        os.makedirs(path, exist_ok=True)


# -- commands -----------------------------------------------------------------

def cmd_make_data(v, extra):
    from .data import SyntheticSpec, make_synthetic

    try:
        spec = SyntheticSpec(v["modes"], v["per_mode"], v["size"], v["regime"], v["seed"], bool(v["variation"]), v["heldout"])
        spec.validate()
    except ValueError as exc:
        raise _as_usage(exc) from None
    ds = make_synthetic(spec)
    _ensure_dir(v["out"])
    ds.save(v["out"])
    return os.path.join(v["out"], MANIFEST_NAME), ["manifest.txt", "spec.txt", "images/"]


_FLAG_ALIASES = {"num_modes": "modes", "samples_per_mode": "per_mode", "image_size": "size", "heldout_fraction": "heldout", "model_id": "model"}


def _as_usage(exc):
    msg = str(exc)
    if ":" in msg:
        key, rest = msg.split(":", 1)
        if key.isidentifier():
            return UsageError(_FLAG_ALIASES.get(key, key), rest.strip())
    return UsageError("config", msg)


def _load_dataset(path, flag="data"):
    from .data import load_dataset

    try:
        return load_dataset(path)
    except FileNotFoundError as exc:
        raise UsageError(flag, str(exc)) from None


def _load_ckpt(path, flag="ckpt"):
    from .checkpoint import load

    if not os.path.exists(path):
        raise UsageError(flag, f"no such file {path}")
    return load(path)


def cmd_train(v, extra):
    from .training import TrainConfig, Trainer

    ds = _load_dataset(v["data"])
    mapping = dict(extra)
    mapping.update(model_id=v["model"], epochs=v["epochs"], seed=v["seed"], dtype=v["dtype"], dataset_id=os.path.basename(os.path.normpath(v["data"])))
    if v["ablate_mc"]:
        mapping["ablate"] = v["ablate_mc"]
    for key in ("batch_size", "lr", "betas"):
        if v[key] is not None:
            mapping[key] = v[key]
    try:
        config = TrainConfig.from_mapping({k: (str(x) if not isinstance(x, str) else x) for k, x in mapping.items()})
        if config.ablate and config.model_id not in ("mcgan", "cgan", "gan"):
            raise ValueError("ablate_mc: only adversarial models have two players")
    except ValueError as exc:
        raise _as_usage(exc) from None
    _ensure_dir(v["out"])
    ckpt = os.path.join(v["out"], "model.ckpt")
    trainer = Trainer(config, ds).fit(checkpoint_path=ckpt)
    with open(os.path.join(v["out"], "curve.txt"), "w") as f:
        f.write(trainer.curve.to_text())
    with open(os.path.join(v["out"], "config.txt"), "w") as f:
        f.write(config.to_text())
    v.update(extra)
    return os.path.join(v["out"], MANIFEST_NAME), ["model.ckpt", "curve.txt", "config.txt"]


def _parse_modes(text, num_modes):
    if text == "all":
        return list(range(num_modes))
    try:
        modes = [int(t) for t in str(text).split(",") if t.strip()]
    except ValueError:
        raise UsageError("modes", f"expected 'all' or comma-separated ids, got {text!r}") from None
    if not modes:
        raise UsageError("modes", "no modes given")
    bad = [m for m in modes if not 0 <= m < num_modes]
    if bad:
        raise UsageError("modes", f"mode {bad[0]} outside [0, {num_modes})")
    return modes


def cmd_generate(v, extra):
    from .data import write_grid
    from .models import sample
    from .rng import Stream

    model = _load_ckpt(v["ckpt"]).model
    if model.family not in ("vae", "gan", "nll"):
        raise UsageError("ckpt", f"{type(model).__name__} is not a generative model")
    modes = _parse_modes(v["modes"], model.num_modes)
    if v["n_per_mode"] < 1:
        raise UsageError("n_per_mode", "must be >= 1")
    images, _ = sample(model, modes, v["n_per_mode"], Stream(v["seed"], "generate"))
    _ensure_dir(os.path.dirname(os.path.abspath(v["out"])))
    write_grid(images, v["n_per_mode"], len(modes), v["out"])
    return _manifest_for_file(v["out"]), [os.path.basename(v["out"])]


def cmd_create(v, extra):
    from .checkpoint import save_model
    from .creation import create_modality
    from .data import write_grid
    from .rng import Stream

    model = _load_ckpt(v["ckpt"]).model
    method = v["method"]
    if method == "crossover":
        for key in ("source", "target"):
            if v[key] is None:
                raise UsageError(key, "is required for crossover")
            if not 0 <= v[key] < model.num_modes:
                raise UsageError(key, f"mode {v[key]} outside [0, {model.num_modes})")
        if v["steps"] < 1:
            raise UsageError("steps", "must be >= 1")
    if method == "dirichlet" and getattr(model, "conditioning", None) != "embed":
        raise UsageError("method", "dirichlet requires an embedding-baseline checkpoint")
    if method in ("crossover", "resample") and getattr(model, "conditioning", None) != "mc":
        raise UsageError("method", f"{method} requires an MC checkpoint")
    if v["num_new"] < 1 or v["n_per_mode"] < 1:
        raise UsageError("num_new" if v["num_new"] < 1 else "n_per_mode", "must be >= 1")
    view, images, labels = create_modality(
        model, method, Stream(v["seed"], "create"), v["n_per_mode"], num_new=v["num_new"], source=v["source"] or 0, target=v["target"] or 0, steps=v["steps"]
    )
    _ensure_dir(v["out"])
    count = int(labels.max()) + 1
    write_grid(images, v["n_per_mode"], count, os.path.join(v["out"], "creations.pgm"))
    with open(os.path.join(v["out"], "labels.txt"), "w") as f:
        f.write("".join(f"{i} {lab}\n" for i, lab in enumerate(labels)))
    artifacts = ["creations.pgm", "labels.txt"]
    if view is not None:
        save_model(view, os.path.join(v["out"], "view.ckpt"))
        artifacts.append("view.ckpt")
    return os.path.join(v["out"], MANIFEST_NAME), artifacts


def cmd_eval(v, extra):
    from . import metrics as M
    from .codebook import one_hot
    from .models import sample
    from .rng import Stream

    model = _load_ckpt(v["ckpt"]).model
    ds = _load_dataset(v["data"])
    wanted = [m.strip() for m in str(v["metrics"]).split(",") if m.strip()]
    unknown = [m for m in wanted if m not in ("is", "fid", "dbi", "nll")]
    if unknown or not wanted:
        raise UsageError("metrics", f"unknown metric {unknown[0]!r}" if unknown else "no metrics requested")
    if ds.num_modes != model.num_modes:
        raise UsageError("data", f"dataset has {ds.num_modes} modes, model {model.num_modes}")
    needs_clf = [m for m in wanted if m in ("is", "fid", "dbi")]
    if needs_clf and not v["classifier"]:
        raise UsageError("classifier", f"required for {','.join(needs_clf)}")
    if "nll" in wanted and model.family not in ("vae", "nll"):
        raise UsageError("metrics", f"nll needs a likelihood model, not {type(model).__name__}")
    lines = []
    seed = v["seed"]
    if needs_clf:
        clf = _load_ckpt(v["classifier"], "classifier").model
        if clf.family != "classifier":
            raise UsageError("classifier", "checkpoint is not an evaluation classifier")
        n = v["n_per_mode"]
        if n * model.num_modes < v["splits"]:
            raise UsageError("splits", "more splits than generated samples")
        images, labels = sample(model, range(model.num_modes), n, Stream(seed, "eval"))
        probs, feats = clf.predict(images)
        if "is" in wanted:
            order = Stream(seed, "is-order").permutation(len(probs))
            mean, std = M.inception_score(probs[order], v["splits"])
            lines.append(M.format_metric("is", mean, std, len(probs), seed))
        if "fid" in wanted:
            _, real_feats = clf.predict(ds.images)
            fid = M.frechet_distance(M.feature_stats(real_feats), M.feature_stats(feats))
            lines.append(M.format_metric("fid", fid, 0.0, len(feats), seed))
        if "dbi" in wanted:
            lines.append(M.format_metric("dbi", M.davies_bouldin(feats, labels), 0.0, len(feats), seed))
        lines.append(M.format_metric("accuracy", float(np.mean(probs.argmax(1) == labels)), 0.0, len(labels), seed))
        extra["classifier_sha256"] = M.model_checksum(clf)
    if "nll" in wanted:
        from .training import as_levels

        x, y = ds.split("heldout")
        if model.family == "nll":
            x = as_levels(x, model.levels)
        elif getattr(model, "model_id", None) == "mcmlpvae":
            x = x.reshape(len(x), -1)
        rep = M.nll_report(model, x.astype(model.dtype) if model.family == "vae" else x, one_hot(y, model.num_modes), Stream(seed, "nll"))
        name = "nll_bound_bpd" if rep.is_bound else "nll_bpd"
        lines.append(M.format_metric(name, rep.bits_per_dim, 0.0, rep.n, seed).rstrip("\n") + f" failures={rep.failures}\n")
    _ensure_dir(os.path.dirname(os.path.abspath(v["out"])))
    with open(v["out"], "w") as f:
        f.write("".join(lines))
    return _manifest_for_file(v["out"]), [os.path.basename(v["out"])]


def hamming_histogram(rows):
    rows = np.asarray(rows, dtype=np.int64)
    d = (rows[:, None, :] != rows[None, :, :]).sum(axis=2)
    iu = np.triu_indices(len(rows), 1)
    values, counts = np.unique(d[iu], return_counts=True)
    return dict(zip(values.tolist(), counts.tolist()))


def inspect_lines(model, layer=None):
    books = model.codebooks()
    if layer is not None and layer not in books:
        raise UsageError("layer", f"no layer {layer!r}; layers: {','.join(books)}")
    lines = []
    for lid, book in books.items():
        if layer is not None and lid != layer:
            continue
        hist = ",".join(f"{k}:{c}" for k, c in hamming_histogram(book.rows).items())
        lines.append(f"layer={lid} modes={book.num_modes} width={book.width} density={book.density()!r} hamming={hist or '-'}\n")
    return lines


def cmd_inspect_codebook(v, extra):
    model = _load_ckpt(v["ckpt"]).model
    if not model.codebooks():
        raise UsageError("ckpt", "model has no multimodal controllers")
    text = "".join(inspect_lines(model, v["layer"]))
    sys.stdout.write(text)
    if v["out"]:
        with open(v["out"], "w") as f:
            f.write(text)
        return _manifest_for_file(v["out"]), [os.path.basename(v["out"])]
    return None, []


COMMANDS = {
    "make-data": cmd_make_data,
    "train": cmd_train,
    "generate": cmd_generate,
    "create": cmd_create,
    "eval": cmd_eval,
    "inspect-codebook": cmd_inspect_codebook,
}


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    started = _now()
    try:
        limit_threads()
    except ValueError:
        print("error: MCGEN_THREADS must be a positive integer", file=sys.stderr)
        return 2
    try:
        values, extra = resolve(args)
        manifest, artifacts = COMMANDS[args.command](values, extra)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (McgenError, OSError, ValueError, KeyError) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 3
    if manifest:
        info = extra if args.command == "eval" else None
        write_manifest(manifest, args.command, values, artifacts, started, info)
    return 0


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
