"""Single-file checkpoint container.

Layout (little-endian)::

    b"MCGM" | u32 version | u32 section count
    per section: u16 name length | name (utf-8) | u8 kind | u64 offset | u64 length
    payload blocks at their absolute offsets

Kinds: 0 f32 tensor, 1 f64 tensor, 2 codebook, 3 utf-8 text. A tensor
payload is ``u32 rank``, ``rank`` × ``u64`` dims, then row-major data.
Writes go to a temporary file renamed into place.
"""
import dataclasses
import os
import struct

import numpy as np

from . import codebook as cb
from .errors import FormatError

MAGIC = b"MCGM"
VERSION = 1
KIND_F32, KIND_F64, KIND_CODEBOOK, KIND_TEXT = 0, 1, 2, 3
_KINDS = (KIND_F32, KIND_F64, KIND_CODEBOOK, KIND_TEXT)
_HEAD = struct.Struct("<4sII")
_ENTRY = struct.Struct("<BQQ")


# -- payload codecs ---------------------------------------------------------

def encode_tensor(arr):
    arr = np.asarray(arr)
    if arr.dtype == np.float32:
        kind = KIND_F32
    elif arr.dtype == np.float64:
        kind = KIND_F64
    else:
        raise FormatError(f"cannot store dtype {arr.dtype}; only float32/float64 tensors")
    head = struct.pack(f"<I{arr.ndim}Q", arr.ndim, *arr.shape)
    return kind, head + arr.astype(arr.dtype.newbyteorder("<"), copy=False).tobytes(order="C")


def decode_tensor(payload, kind):
    if len(payload) < 4:
        raise FormatError("tensor payload truncated before its rank")
    (rank,) = struct.unpack_from("<I", payload)
    end = 4 + 8 * rank
    if len(payload) < end:
        raise FormatError("tensor payload truncated inside its dims")
    dims = struct.unpack_from(f"<{rank}Q", payload, 4)
    dtype = np.dtype("<f4") if kind == KIND_F32 else np.dtype("<f8")
    count = int(np.prod(dims, dtype=np.int64)) if rank else 1
    if len(payload) - end != count * dtype.itemsize:
        raise FormatError(f"tensor payload holds {len(payload) - end} bytes, dims {dims} need {count * dtype.itemsize}")
    return np.frombuffer(payload, dtype=dtype, offset=end).reshape(dims).astype(dtype.newbyteorder("="))


# -- container --------------------------------------------------------------

def encode_container(sections):
    """``sections``: list of (name, kind, payload bytes)."""
    names = [n for n, _, _ in sections]
    if len(set(names)) != len(names):
        dup = next(n for n in names if names.count(n) > 1)
        raise FormatError(f"duplicate section {dup!r}")
    encoded = [n.encode("utf-8") for n in names]
    for n in encoded:
        if len(n) > 0xFFFF:
            raise FormatError("section name too long")
    header_len = _HEAD.size + sum(2 + len(n) + _ENTRY.size for n in encoded)
    out = [_HEAD.pack(MAGIC, VERSION, len(sections))]
    offset = header_len
    for n, (_, kind, payload) in zip(encoded, sections):
        if kind not in _KINDS:
            raise FormatError(f"unknown section kind {kind}")
        out.append(struct.pack("<H", len(n)) + n + _ENTRY.pack(kind, offset, len(payload)))
        offset += len(payload)
    out.extend(payload for _, _, payload in sections)
    return b"".join(out)


def decode_container(data):
    """Bytes -> ordered dict ``name -> (kind, payload bytes)`` after validating the manifest."""
    if len(data) < _HEAD.size:
        raise FormatError("file too short for a checkpoint header")
    magic, version, count = _HEAD.unpack_from(data)
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}; not a checkpoint")
    if version != VERSION:
        raise FormatError(f"unsupported checkpoint version {version}")
    pos = _HEAD.size
    entries = {}
    for _ in range(count):
        if pos + 2 > len(data):
            raise FormatError("manifest overflow: entry runs past end of file")
        (nlen,) = struct.unpack_from("<H", data, pos)
        pos += 2
        if pos + nlen + _ENTRY.size > len(data):
            raise FormatError("manifest overflow: entry runs past end of file")
        try:
            name = data[pos : pos + nlen].decode("utf-8")
        except UnicodeDecodeError:
            raise FormatError("section name is not utf-8") from None
        pos += nlen
        kind, offset, length = _ENTRY.unpack_from(data, pos)
        pos += _ENTRY.size
        if name in entries:
            raise FormatError(f"duplicate section {name!r}")
        if kind not in _KINDS:
            raise FormatError(f"section {name!r} has unknown kind {kind}")
        entries[name] = (kind, offset, length)
    spans = sorted((off, off + ln, name) for name, (_, off, ln) in entries.items())
    prev_end = pos
    for start, end, name in spans:
        if end > len(data):
            raise FormatError(f"manifest overflow: section {name!r} ends past end of file")
        if start < prev_end:
            raise FormatError(f"section {name!r} overlaps the manifest or another section")
        prev_end = end
    return {name: (kind, data[off : off + ln]) for name, (kind, off, ln) in entries.items()}


def write_container(path, sections):
    blob = encode_container(sections)
    tmp = f"{path}.tmp{os.getpid()}"
    with open(tmp, "wb") as f:
        f.write(blob)
        f.flush()
        os.fsync(f.fileno())
    os.replace(tmp, path)


def read_container(path):
    with open(path, "rb") as f:
        return decode_container(f.read())


def decode_section(kind, payload):
    if kind in (KIND_F32, KIND_F64):
        return decode_tensor(payload, kind)
    if kind == KIND_CODEBOOK:
        return cb.deserialize(payload)
    return payload.decode("utf-8")


def text_section(name, text):
    return name, KIND_TEXT, text.encode("utf-8")


def tensor_section(name, arr):
    kind, payload = encode_tensor(arr)
    return name, kind, payload


# -- models and trainers ----------------------------------------------------

def _model_text(model):
    from .training import _format_value

    lines = [f"class={type(model).__name__}"]
    lines += [f"{k}={_format_value(v)}" for k, v in model.config.items()]
    lines.append(f"num_modes_view={model.num_modes}")
    return "".join(line + "\n" for line in lines)


def model_sections(model):
    sections = [text_section("model", _model_text(model))]
    for name, p in model.named_parameters():
        sections.append(tensor_section(f"param/{name}", p.data))
    for name, buf in model.named_buffers():
        sections.append(tensor_section(f"buffer/{name}", np.asarray(buf)))
    for _, ctrl in model.controllers():
        sections.append((f"codebook/{ctrl.book.layer_id}", KIND_CODEBOOK, cb.serialize(ctrl.book)))
    return sections


def _build_model(text):
    from .models import CLASSES
    from .training import _parse_value, parse_kv_lines

    raw = parse_kv_lines(text)
    cls_name = raw.pop("class", None)
    if cls_name not in CLASSES:
        raise FormatError(f"unknown model class {cls_name!r}")
    view_modes = int(raw.pop("num_modes_view"))
    kwargs = {}
    for k, v in raw.items():
        if k in ("conditioning", "dtype", "ablate"):
            kwargs[k] = v
        else:
            kwargs[k] = _parse_value(v)
    for key in ("widths", "g_widths", "d_widths"):
        if key in kwargs and not isinstance(kwargs[key], tuple):
            kwargs[key] = (kwargs[key],)
    num_modes = kwargs.pop("num_modes")
    return CLASSES[cls_name](num_modes, **kwargs), view_modes


def restore_model(sections):
    """Rebuild a model from decoded sections; every parameter must appear exactly once."""
    if "model" not in sections:
        raise FormatError("checkpoint has no model section")
    model, view_modes = _build_model(decode_section(*sections["model"]))
    expected = set()
    for name, p in model.named_parameters():
        key = f"param/{name}"
        expected.add(key)
        if key not in sections:
            raise FormatError(f"missing parameter {name!r}")
        arr = decode_section(*sections[key])
        if arr.shape != p.data.shape or arr.dtype != p.data.dtype:
            raise FormatError(f"parameter {name!r}: stored {arr.dtype}{arr.shape}, model has {p.data.dtype}{p.data.shape}")
        p.data[...] = arr
    for name, buf in model.named_buffers():
        key = f"buffer/{name}"
        expected.add(key)
        if key not in sections:
            raise FormatError(f"missing buffer {name!r}")
        arr = decode_section(*sections[key])
        if arr.shape != buf.shape:
            raise FormatError(f"buffer {name!r}: stored shape {arr.shape}, model has {buf.shape}")
        buf[...] = arr
    books = {}
    for _, ctrl in model.controllers():
        key = f"codebook/{ctrl.book.layer_id}"
        expected.add(key)
        if key not in sections:
            raise FormatError(f"missing codebook {ctrl.book.layer_id!r}")
        books[ctrl.book.layer_id] = decode_section(*sections[key])
    for _, ctrl in model.controllers():
        ctrl.book = books[ctrl.book.layer_id]
    model.num_modes = view_modes
    stray = [k for k in sections if k.split("/", 1)[0] in ("param", "buffer", "codebook") and k not in expected]
    if stray:
        raise FormatError(f"section {stray[0]!r} does not belong to the model")
    return model


def save_model(model, path, extra=()):
    write_container(path, model_sections(model) + list(extra))


def load_model(path):
    return restore_model(read_container(path))


@dataclasses.dataclass
class Checkpoint:
    model: object
    config: object
    curve: object
    epoch: int
    optimizers: dict
    sections: dict


def trainer_sections(trainer):
    sections = model_sections(trainer.model)
    sections.append(text_section("train_config", trainer.config.to_text()))
    sections.append(text_section("curve", trainer.curve.to_text()))
    state = [f"epoch={trainer.epoch}"]
    for opt_name, opt in trainer.optimizers.items():
        arrays = opt.state_arrays()
        state.append(f"optim.{opt_name}.t={arrays.pop('t')}")
        for key, arr in arrays.items():
            sections.append(tensor_section(f"optim/{opt_name}/{key}", arr))
    sections.append(text_section("trainer", "".join(s + "\n" for s in state)))
    return sections


def save_trainer(trainer, path):
    write_container(path, trainer_sections(trainer))


def load(path):
    """Decode a checkpoint into model, train config, curve, epoch and raw optimizer arrays."""
    from .training import LearningCurve, TrainConfig, parse_kv_lines

    sections = read_container(path)
    model = restore_model(sections)
    config = TrainConfig.from_text(decode_section(*sections["train_config"])) if "train_config" in sections else None
    curve = LearningCurve.from_text(decode_section(*sections["curve"])) if "curve" in sections else LearningCurve()
    epoch, optimizers = 0, {}
    if "trainer" in sections:
        state = parse_kv_lines(decode_section(*sections["trainer"]))
        epoch = int(state.pop("epoch"))
        for key, value in state.items():
            _, opt_name, _ = key.split(".", 2)
            optimizers[opt_name] = {"t": int(value)}
        for name, (kind, payload) in sections.items():
            if name.startswith("optim/"):
                _, opt_name, key = name.split("/", 2)
                if opt_name not in optimizers:
                    raise FormatError(f"optimizer arrays for unknown optimizer {opt_name!r}")
                optimizers[opt_name][key] = decode_section(kind, payload)
    return Checkpoint(model, config, curve, epoch, optimizers, sections)


def load_trainer(path, dataset, trainer_cls, sequential_modes=False):
    ckpt = load(path)
    if ckpt.config is None:
        raise FormatError("checkpoint holds no training state")
    trainer = trainer_cls(ckpt.config, dataset, model=ckpt.model, sequential_modes=sequential_modes)
    trainer.epoch = ckpt.epoch
    trainer.curve = ckpt.curve
    for name, opt in trainer.optimizers.items():
        if name not in ckpt.optimizers:
            raise FormatError(f"missing optimizer state {name!r}")
        opt.load_state_arrays(ckpt.optimizers[name])
    return trainer
