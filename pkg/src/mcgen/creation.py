"""Creating modalities a model was never trained on.

MC models get new codewords over their trained weights: crossover between
two learned modes, or entirely fresh codebooks. Embedding baselines get
Dirichlet(1) mixtures of their learned embedding rows.
"""
import numpy as np

from .codebook import Codebook, sample_codebook, transition
from .models.base import mode_major_selector

METHODS = ("crossover", "resample", "dirichlet")


def _require_mc(model):
    if model.conditioning != "mc":
        raise ValueError(f"codebook creation needs an MC model, got conditioning {model.conditioning!r}")


def codebook_view(model, rows_by_layer):
    """Model view whose mode ``k`` uses row ``k`` of each layer's new rows."""
    books = {}
    counts = set()
    for lid, book in model.codebooks().items():
        rows = np.asarray(rows_by_layer[lid], dtype=np.uint8)
        counts.add(len(rows))
        books[lid] = Codebook(rows, layer_id=lid, seed=book.seed, checked=False)
    if len(counts) != 1:
        raise ValueError("every layer needs the same number of new codewords")
    view = model.with_codebooks(books)
    view.num_modes = counts.pop()
    return view


def crossover_view(model, source, target, steps, stream):
    """Modes ``0..steps`` of the view morph ``source`` into ``target`` layer by layer.

    Mode 0 equals the source codewords and mode ``steps`` the target ones.
    ``source == target`` is allowed and yields the source at every step.
    """
    _require_mc(model)
    for name, m in (("source", source), ("target", target)):
        if not 0 <= m < model.num_modes:
            raise ValueError(f"{name}: mode {m} outside [0, {model.num_modes})")
    rows = {}
    for lid, book in model.codebooks().items():
        rows[lid] = transition(book.rows[source], book.rows[target], steps, stream.child("crossover", lid))
    return codebook_view(model, rows)


def resample_view(model, num_new, stream):
    """``num_new`` modalities from fresh uniform codebooks at every layer."""
    _require_mc(model)
    rows = {}
    for lid, book in model.codebooks().items():
        rows[lid] = sample_codebook(num_new, book.width, stream.child("resample", lid), layer_id=lid).rows
    return codebook_view(model, rows)


def dirichlet_weights(num_modes, num_new, stream):
    return stream.dirichlet(np.ones(num_modes), num_new)


def dirichlet_creations(model, num_new, n_per_mode, stream):
    """Samples from ``num_new`` Dirichlet(1) mixtures of an embedding model's rows."""
    if model.conditioning != "embed":
        raise ValueError("Dirichlet creation needs an embedding-conditioned model")
    weights = dirichlet_weights(model.num_modes, num_new, stream.child("weights"))
    labels = np.repeat(np.arange(num_new), n_per_mode)
    images = model.generate(weights[labels], stream.child("samples"))
    return images, labels, weights


def create_modality(model, method, stream, n_per_mode, num_new=8, source=0, target=1, steps=8):
    """Return (view or None, images, labels); labels index the created modalities."""
    if method == "crossover":
        view = crossover_view(model, source, target, steps, stream)
    elif method == "resample":
        view = resample_view(model, num_new, stream)
    elif method == "dirichlet":
        images, labels, _ = dirichlet_creations(model, num_new, n_per_mode, stream)
        return None, images, labels
    else:
        raise ValueError(f"method must be one of {METHODS}")
    labels, h = mode_major_selector(range(view.num_modes), n_per_mode, view.num_modes)
    return view, view.generate(h, stream.child("samples")), labels
