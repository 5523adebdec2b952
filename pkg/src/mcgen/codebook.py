"""Modality codebooks: one binary codeword per mode, one book per MC layer.

Serialized layout (all integers little-endian)::

    u32 C | u32 D | u8 flags | u32 id_len | id (utf-8) | i64 seed (-1: none)
    C rows of ceil(D/8) bytes, bits packed MSB-first, last byte zero-padded

``flags`` bit 0 marks an unchecked book (all-ones reduction books and
creation views), which may hold repeated rows.
"""
import struct
from dataclasses import dataclass

import numpy as np

from .errors import CapacityError, FormatError, SelectorError

MAX_REJECTIONS = 10**6
_HEAD = struct.Struct("<IIBI")
_SEED = struct.Struct("<q")


@dataclass(frozen=True, eq=False)
class Codebook:
    rows: np.ndarray
    layer_id: str = ""
    seed: int = None
    checked: bool = True

    def __post_init__(self):
        rows = np.ascontiguousarray(self.rows, dtype=np.uint8)
        if rows.ndim != 2 or rows.shape[0] < 1 or rows.shape[1] < 1:
            raise ValueError(f"codebook rows must be a non-empty C×D matrix, got shape {rows.shape}")
        if np.any(rows > 1):
            raise ValueError("codebook entries must be 0 or 1")
        rows.setflags(write=False)
        object.__setattr__(self, "rows", rows)
        if self.checked:
            validate_rows(rows)

    @property
    def num_modes(self):
        return self.rows.shape[0]

    @property
    def width(self):
        return self.rows.shape[1]

    def __eq__(self, other):
        return (
            isinstance(other, Codebook)
            and self.layer_id == other.layer_id
            and self.seed == other.seed
            and self.checked == other.checked
            and np.array_equal(self.rows, other.rows)
        )

    def density(self):
        return float(self.rows.mean())

    @classmethod
    def ones(cls, num_modes, width, layer_id=""):
        """The all-ones book: every mode sees the full layer (reduction to the backbone)."""
        return cls(np.ones((num_modes, width), dtype=np.uint8), layer_id, None, checked=False)


def validate_rows(rows):
    if not np.all(rows.any(axis=1)):
        raise FormatError("codebook contains an all-zero codeword")
    if len({r.tobytes() for r in rows}) != rows.shape[0]:
        raise FormatError("codebook contains duplicate codewords")


def capacity(width):
    return 2**width - 1


def sample_codebook(num_modes, width, stream, layer_id="", seed=None):
    """Draw ``num_modes`` distinct non-zero codewords uniformly from {0,1}^width.

    Rows are drawn one at a time and rejected on collision or all-zero.
    """
    if num_modes < 1:
        raise ValueError("need at least one mode")
    if num_modes > capacity(width):
        raise CapacityError(f"{num_modes} modes exceed the {capacity(width)} non-zero words of width {width}")
    rows = np.empty((num_modes, width), dtype=np.uint8)
    seen = set()
    rejections = 0
    i = 0
    while i < num_modes:
        row = stream.bits(width)
        key = row.tobytes()
        if not row.any() or key in seen:
            rejections += 1
            if rejections > MAX_REJECTIONS:
                raise CapacityError(f"gave up after {MAX_REJECTIONS} rejected codewords")
            continue
        seen.add(key)
        rows[i] = row
        i += 1
    return Codebook(rows, layer_id, seed if seed is not None else stream.seed)


def resample_codebook(book, stream):
    """Fresh uniform book with the same shape and layer id; ignores the trained rows."""
    return sample_codebook(book.num_modes, book.width, stream, book.layer_id, stream.seed)


def one_hot(labels, num_modes):
    labels = np.asarray(labels, dtype=np.int64)
    if labels.ndim != 1:
        raise SelectorError("labels must be a vector")
    if labels.size and (labels.min() < 0 or labels.max() >= num_modes):
        raise SelectorError(f"labels outside [0, {num_modes})")
    h = np.zeros((labels.size, num_modes), dtype=np.uint8)
    h[np.arange(labels.size), labels] = 1
    return h


def check_selector(h, num_modes=None):
    h = np.asarray(h)
    if h.ndim != 2:
        raise SelectorError(f"selector must be N×C, got shape {h.shape}")
    if num_modes is not None and h.shape[1] != num_modes:
        raise SelectorError(f"selector has {h.shape[1]} columns, codebook has {num_modes} modes")
    if not (np.all((h == 0) | (h == 1)) and np.all(h.sum(axis=1) == 1)):
        raise SelectorError("selector rows must be one-hot")
    return h


def select_masks(book, h):
    """N×D masks ``h × e``: row n is the codeword of the mode selected by h[n]."""
    h = check_selector(h, book.num_modes)
    return h.astype(np.int64) @ book.rows.astype(np.int64)


def crossover(source, target, stream, p=0.5, selection=None):
    """Child codeword taking each bit from ``target`` with probability ``p``.

    ``selection`` (boolean, True = take target) overrides the random draw.
    Bits where the parents agree are always preserved.
    """
    source = np.asarray(source, dtype=np.uint8)
    target = np.asarray(target, dtype=np.uint8)
    if source.shape != target.shape:
        raise ValueError(f"parent codewords differ in length: {source.shape} vs {target.shape}")
    if selection is None:
        selection = stream.uniform(source.shape) < p
    return np.where(np.asarray(selection, dtype=bool), target, source).astype(np.uint8)


def transition(source, target, steps, stream):
    """``steps + 1`` codewords morphing source into target.

    One uniform threshold per bit decides when that bit switches; step k
    takes the target bit wherever threshold < k/steps. Step 0 is the source,
    the last step the target, and the midpoint is a fair crossover.
    """
    source = np.asarray(source, dtype=np.uint8)
    target = np.asarray(target, dtype=np.uint8)
    if steps < 1:
        raise ValueError("need at least one step")
    u = stream.uniform(source.shape)
    out = [crossover(source, target, None, selection=u < k / steps) for k in range(steps + 1)]
    out[-1] = target.copy()
    return np.stack(out)


def serialize(book):
    layer = book.layer_id.encode("utf-8")
    flags = 0 if book.checked else 1
    head = _HEAD.pack(book.num_modes, book.width, flags, len(layer)) + layer
    seed = -1 if book.seed is None else int(book.seed)
    return head + _SEED.pack(seed) + np.packbits(book.rows, axis=1, bitorder="big").tobytes()


def deserialize(blob):
    blob = bytes(blob)
    if len(blob) < _HEAD.size:
        raise FormatError("codebook block truncated in header")
    c, d, flags, id_len = _HEAD.unpack_from(blob, 0)
    if c < 1 or d < 1:
        raise FormatError(f"invalid codebook dimensions {c}×{d}")
    if flags & ~1:
        raise FormatError(f"unknown codebook flags {flags:#x}")
    pos = _HEAD.size
    if len(blob) < pos + id_len + _SEED.size:
        raise FormatError("codebook block truncated in layer id")
    layer = blob[pos : pos + id_len].decode("utf-8")
    pos += id_len
    (seed,) = _SEED.unpack_from(blob, pos)
    pos += _SEED.size
    row_bytes = (d + 7) // 8
    if len(blob) != pos + c * row_bytes:
        raise FormatError(f"codebook payload is {len(blob) - pos} bytes, expected {c * row_bytes}")
    packed = np.frombuffer(blob, dtype=np.uint8, offset=pos).reshape(c, row_bytes)
    rows = np.unpackbits(packed, axis=1, count=d, bitorder="big")
    return Codebook(rows, layer, None if seed < 0 else seed, checked=not flags & 1)
