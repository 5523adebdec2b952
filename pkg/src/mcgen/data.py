"""Procedural multimodal glyph datasets, PGM/PPM image IO and sample grids.

Every mode is one glyph (bar, ellipse, triangle or square) with its own
angle, position, size and stroke width. Mode parameters are drawn from a
grid without replacement, so two modes never share all of them.
"""
import dataclasses
import itertools
import os
import re

import numpy as np

from .errors import FormatError
from .rng import Stream

KINDS = ("bar", "ellipse", "triangle", "square")
# rotational symmetry period per kind, in degrees; angles are quarter steps of it
_PERIOD = {"bar": 180.0, "ellipse": 180.0, "triangle": 120.0, "square": 90.0}
_OFFSETS = ((-1, -1), (1, -1), (-1, 1), (1, 1))
_SCALES = (1.0, 0.7)
REGIMES = ("low", "high")


@dataclasses.dataclass(frozen=True)
class SyntheticSpec:
    num_modes: int = 8
    samples_per_mode: int = 500
    image_size: int = 16
    regime: str = "low"
    seed: int = 0
    variation: bool = True
    heldout_fraction: float = 0.2

    def validate(self):
        if self.num_modes < 2:
            raise ValueError("num_modes: need at least 2 modes")
        if self.num_modes > max_modes():
            raise ValueError(f"num_modes: at most {max_modes()} distinct glyphs are available")
        if self.image_size < 8:
            raise ValueError("image_size: glyphs need at least 8×8 pixels")
        if self.samples_per_mode < 1:
            raise ValueError("samples_per_mode: must be >= 1")
        if self.regime not in REGIMES:
            raise ValueError(f"regime: must be one of {REGIMES}")
        if not 0 <= self.heldout_fraction < 1:
            raise ValueError("heldout_fraction: must lie in [0, 1)")

    def to_dict(self):
        return dataclasses.asdict(self)


def max_modes():
    return len(KINDS) * 4 * len(_OFFSETS) * len(_SCALES)


@dataclasses.dataclass(frozen=True)
class Glyph:
    kind: str
    angle: float
    offset: tuple
    scale: float
    width: float


def mode_glyphs(num_modes, seed):
    """Base glyph of each mode, a deterministic function of ``seed``."""
    combos = list(itertools.product(range(len(KINDS)), range(4), range(len(_OFFSETS)), range(len(_SCALES))))
    stream = Stream(seed, "glyphs")
    order = stream.permutation(len(combos))[:num_modes]
    glyphs = []
    for m, ci in enumerate(order):
        k, a, o, s = combos[ci]
        kind = KINDS[k]
        width = 1.6 + 0.8 * float(stream.child("width", m).uniform())
        glyphs.append(Glyph(kind, a * _PERIOD[kind] / 4, _OFFSETS[o], _SCALES[s], width))
    return glyphs


def _signed_distance(kind, px, py, radius, width):
    """Approximate signed distance in pixels (negative inside) of a glyph at the origin."""
    if kind == "bar":
        # horizontal capsule of half-length ``radius``
        dx = np.maximum(np.abs(px) - radius, 0.0)
        return np.hypot(dx, py) - width / 2
    if kind == "ellipse":
        a, b = radius, radius * 0.5
        r = np.hypot(px / a, py / b)
        return (r - 1.0) * b
    sides = 3 if kind == "triangle" else 4
    apothem = radius * np.cos(np.pi / sides)
    d = np.full(px.shape, -np.inf)
    for k in range(sides):
        t = 2 * np.pi * k / sides + np.pi / 2 + np.pi / sides
        d = np.maximum(d, px * np.cos(t) + py * np.sin(t) - apothem)
    return d


def render_glyph(glyph, size, angle=0.0, scale=1.0, shift=(0.0, 0.0)):
    """Anti-aliased glyph on a ``size``×``size`` grid, values in [0, 1]."""
    unit = size / 16.0
    cy = (size - 1) / 2 + glyph.offset[1] * 2.5 * unit + shift[1]
    cx = (size - 1) / 2 + glyph.offset[0] * 2.5 * unit + shift[0]
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    theta = np.deg2rad(glyph.angle + angle)
    c, s = np.cos(theta), np.sin(theta)
    dx, dy = xx - cx, yy - cy
    px = c * dx + s * dy
    py = -s * dx + c * dy
    radius = 4.5 * unit * glyph.scale * scale
    sd = _signed_distance(glyph.kind, px, py, radius, glyph.width * unit)
    return np.clip(0.5 - sd, 0.0, 1.0)


def _texture(stream, size):
    yy, xx = np.mgrid[0:size, 0:size] / size
    fx, fy = stream.uniform(2, 1.0, 3.0)
    phase = stream.uniform(2, 0, 2 * np.pi)
    amp = stream.uniform(None, 0.1, 0.3)
    return amp * 0.5 * (1 + np.sin(2 * np.pi * fx * xx + phase[0]) * np.sin(2 * np.pi * fy * yy + phase[1]))


def quantize(x):
    """Snap [0, 1] values onto the 1/255 grid (round half up)."""
    return (np.floor(np.clip(x, 0.0, 1.0) * 255 + 0.5) / 255).astype(np.float32)


def _variant(glyph, size, regime, stream):
    if regime == "low":
        jx, jy = stream.integers(-1, 2, 2)
        img = render_glyph(glyph, size, shift=(float(jx), float(jy)))
        return img + stream.normal((size, size)) * 0.05
    angle = stream.uniform(None, -30.0, 30.0)
    scale = stream.uniform(None, 0.75, 1.25)
    jx, jy = stream.integers(-1, 2, 2)
    img = render_glyph(glyph, size, angle=angle, scale=scale, shift=(float(jx), float(jy)))
    img = np.maximum(img, _texture(stream.child("texture"), size))
    return img + stream.normal((size, size)) * 0.05


@dataclasses.dataclass
class Dataset:
    images: np.ndarray
    labels: np.ndarray
    train_idx: np.ndarray
    heldout_idx: np.ndarray
    num_modes: int
    meta: dict = dataclasses.field(default_factory=dict)

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        self.train_idx = np.asarray(self.train_idx, dtype=np.int64)
        self.heldout_idx = np.asarray(self.heldout_idx, dtype=np.int64)
        if self.images.ndim != 4 or len(self.images) != len(self.labels):
            raise ValueError("images must be N×c×H×W with one label each")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.num_modes):
            raise ValueError("labels must lie in [0, num_modes)")
        if np.intersect1d(self.train_idx, self.heldout_idx).size:
            raise ValueError("train and heldout splits overlap")

    def __len__(self):
        return len(self.labels)

    def split(self, name):
        idx = {"train": self.train_idx, "heldout": self.heldout_idx}[name]
        return self.images[idx], self.labels[idx]

    def save(self, directory):
        save_dataset(self, directory)


def make_synthetic(spec):
    spec.validate()
    glyphs = mode_glyphs(spec.num_modes, spec.seed)
    size, n = spec.image_size, spec.samples_per_mode
    images = np.empty((spec.num_modes * n, 1, size, size), dtype=np.float32)
    labels = np.repeat(np.arange(spec.num_modes), n)
    root = Stream(spec.seed, "samples")
    for m, glyph in enumerate(glyphs):
        if not spec.variation:
            images[m * n : (m + 1) * n, 0] = quantize(render_glyph(glyph, size))
            continue
        for i in range(n):
            images[m * n + i, 0] = quantize(_variant(glyph, size, spec.regime, root.child(m, i)))
    split = Stream(spec.seed, "split")
    heldout = []
    for m in range(spec.num_modes):
        k = int(round(n * spec.heldout_fraction))
        heldout.extend(m * n + split.child(m).permutation(n)[:k])
    heldout = np.sort(np.asarray(heldout, dtype=np.int64))
    train = np.setdiff1d(np.arange(len(labels)), heldout)
    return Dataset(images, labels, train, heldout, spec.num_modes, meta=spec.to_dict())


# -- image IO ------------------------------------------------------------------

_HEADER = re.compile(rb"(P[56])(?:\s+|#[^\n]*\n)+(\d+)(?:\s+|#[^\n]*\n)+(\d+)(?:\s+|#[^\n]*\n)+(\d+)\s")


def to_bytes(image):
    """[0, 1] floats to uint8 with round half up."""
    return np.floor(np.clip(np.asarray(image, dtype=np.float64), 0.0, 1.0) * 255 + 0.5).astype(np.uint8)


def encode_image(image):
    """PGM (1×H×W or H×W) or PPM (3×H×W) bytes."""
    image = np.asarray(image)
    if image.ndim == 2:
        image = image[None]
    if image.ndim != 3 or image.shape[0] not in (1, 3):
        raise ValueError(f"expected a 1×H×W or 3×H×W image, got shape {image.shape}")
    c, h, w = image.shape
    magic = b"P5" if c == 1 else b"P6"
    body = to_bytes(image).transpose(1, 2, 0).tobytes()
    return magic + f"\n{w} {h}\n255\n".encode("ascii") + body


def decode_image(data, dtype=np.float32):
    m = _HEADER.match(data)
    if not m:
        raise FormatError("malformed PGM/PPM header")
    magic, w, h, maxval = m.group(1), int(m.group(2)), int(m.group(3)), int(m.group(4))
    if maxval != 255:
        raise FormatError(f"unsupported maxval {maxval}; only 255 is accepted")
    if w < 1 or h < 1:
        raise FormatError("image dimensions must be positive")
    c = 1 if magic == b"P5" else 3
    body = data[m.end() :]
    need = w * h * c
    if len(body) < need:
        raise FormatError(f"truncated pixel data: expected {need} bytes, found {len(body)}")
    if len(body) > need:
        raise FormatError(f"trailing data: expected {need} bytes, found {len(body)}")
    pix = np.frombuffer(body, dtype=np.uint8).reshape(h, w, c).transpose(2, 0, 1)
    return (pix.astype(np.float64) / 255).astype(dtype)


def write_image(path, image):
    _atomic_write(path, encode_image(image))


def read_image(path, dtype=np.float32):
    with open(path, "rb") as f:
        return decode_image(f.read(), dtype)


def _atomic_write(path, data):
    tmp = f"{path}.tmp{os.getpid()}"
    with open(tmp, "wb") as f:
        f.write(data)
    os.replace(tmp, path)


def tile_grid(images, rows, cols, separator=1.0):
    """Column-major tiling: image ``i`` lands in column ``i // rows``, row ``i % rows``."""
    images = np.asarray(images)
    if images.ndim == 3:
        images = images[:, None]
    n, c, h, w = images.shape
    if rows * cols < n:
        raise ValueError(f"a {rows}×{cols} grid cannot hold {n} images")
    grid = np.full((c, rows * h + rows - 1, cols * w + cols - 1), separator, dtype=np.float64)
    for i in range(n):
        r, k = i % rows, i // rows
        grid[:, r * (h + 1) : r * (h + 1) + h, k * (w + 1) : k * (w + 1) + w] = images[i]
    return grid


def write_grid(images, rows, cols, path):
    write_image(path, tile_grid(images, rows, cols))


# -- dataset directories -----------------------------------------------------

def save_dataset(ds, directory):
    """``images/<index>.pgm``, ``manifest.txt`` (``index label split``) and ``spec.txt``."""
    os.makedirs(os.path.join(directory, "images"), exist_ok=True)
    split = np.full(len(ds), "", dtype=object)
    split[ds.train_idx] = "train"
    split[ds.heldout_idx] = "heldout"
    lines = []
    for i in range(len(ds)):
        write_image(os.path.join(directory, "images", f"{i:06d}.pgm"), ds.images[i])
        lines.append(f"{i} {ds.labels[i]} {split[i] or 'none'}\n")
    _atomic_write(os.path.join(directory, "manifest.txt"), "".join(lines).encode())
    meta = dict(ds.meta, num_modes=ds.num_modes)
    _atomic_write(os.path.join(directory, "spec.txt"), "".join(f"{k}={v}\n" for k, v in meta.items()).encode())


def load_dataset(directory):
    from .training import parse_kv_lines

    manifest = os.path.join(directory, "manifest.txt")
    if not os.path.exists(manifest):
        raise FileNotFoundError(f"no manifest.txt in {directory}")
    with open(os.path.join(directory, "spec.txt")) as f:
        meta = parse_kv_lines(f.read())
    num_modes = int(meta["num_modes"])
    images, labels, train, heldout = [], [], [], []
    with open(manifest) as f:
        for lineno, line in enumerate(f, 1):
            parts = line.split()
            if len(parts) != 3:
                raise FormatError(f"manifest line {lineno}: expected 'index label split'")
            i, label, which = int(parts[0]), int(parts[1]), parts[2]
            if i != len(images):
                raise FormatError(f"manifest line {lineno}: indices must be consecutive from 0")
            images.append(read_image(os.path.join(directory, "images", f"{i:06d}.pgm")))
            labels.append(label)
            if which == "train":
                train.append(i)
            elif which == "heldout":
                heldout.append(i)
            elif which != "none":
                raise FormatError(f"manifest line {lineno}: unknown split {which!r}")
    return Dataset(np.stack(images), np.asarray(labels), train, heldout, num_modes, meta=meta)
