"""Classifier-based IS/FID, Davies-Bouldin index and likelihood reporting."""
import dataclasses
import hashlib
import math

import numpy as np

from .errors import DegenerateClusteringError, ShapeError

KL_EPS = 1e-12


def inception_score(probs, splits=10):
    """``exp(E[KL(p(y|x) || p(y))])`` per split; returns (mean, std) over splits."""
    probs = np.asarray(probs, dtype=np.float64)
    if probs.ndim != 2 or len(probs) == 0:
        raise ShapeError("probabilities must be a non-empty N×C array")
    if np.any(probs < 0) or not np.allclose(probs.sum(axis=1), 1.0, atol=1e-6):
        raise ValueError("probability rows must lie on the simplex")
    if not 1 <= splits <= len(probs):
        raise ValueError(f"splits must lie in [1, {len(probs)}]")
    scores = []
    for part in np.array_split(probs, splits):
        marginal = part.mean(axis=0, keepdims=True)
        kl = np.sum(part * (np.log(np.maximum(part, KL_EPS)) - np.log(np.maximum(marginal, KL_EPS))), axis=1)
        scores.append(math.exp(kl.mean()))
    return float(np.mean(scores)), float(np.std(scores))


@dataclasses.dataclass(frozen=True)
class FeatureStats:
    mean: np.ndarray
    cov: np.ndarray
    n: int

    def __post_init__(self):
        d = self.mean.shape
        if self.mean.ndim != 1 or self.cov.shape != d * 2:
            raise ShapeError(f"covariance {self.cov.shape} does not match mean {self.mean.shape}")


def feature_stats(features):
    """Mean and (explicitly symmetrized) sample covariance of N×d features."""
    x = np.asarray(features, dtype=np.float64)
    if x.ndim != 2 or len(x) < 2:
        raise ShapeError("need an N×d feature matrix with N >= 2")
    if not np.all(np.isfinite(x)):
        raise ValueError("features contain non-finite values")
    cov = np.cov(x, rowvar=False).reshape(x.shape[1], x.shape[1])
    return FeatureStats(x.mean(axis=0), (cov + cov.T) / 2, len(x))


def _root_eigvals(vals):
    """Square roots of PSD eigenvalues; those within eigh roundoff of zero count as zero."""
    floor = len(vals) * np.finfo(np.float64).eps * np.abs(vals).max(initial=0.0)
    return np.sqrt(np.where(vals > floor, vals, 0.0))


def psd_sqrt(c):
    """Symmetric square root of a PSD matrix; negative eigenvalues clip to zero."""
    c = np.asarray(c, dtype=np.float64)
    vals, vecs = np.linalg.eigh((c + c.T) / 2)
    return (vecs * _root_eigvals(vals)) @ vecs.T


def frechet_distance(a, b):
    """``|mu_a - mu_b|^2 + tr(C_a + C_b - 2 (C_a C_b)^{1/2})``, clamped at zero.

    The trace of the product root is taken from the symmetric matrix
    ``C_a^{1/2} C_b C_a^{1/2}``, which has the same eigenvalues.
    """
    if a.mean.shape != b.mean.shape:
        raise ShapeError(f"feature dimensions differ: {a.mean.shape[0]} vs {b.mean.shape[0]}")
    for s in (a, b):
        if not (np.all(np.isfinite(s.mean)) and np.all(np.isfinite(s.cov))):
            raise ValueError("feature statistics contain non-finite values")
    if np.array_equal(a.mean, b.mean) and np.array_equal(a.cov, b.cov):
        return 0.0
    ra = psd_sqrt(a.cov)
    m = ra @ b.cov @ ra
    vals = np.linalg.eigvalsh((m + m.T) / 2)
    tr_root = float(np.sum(_root_eigvals(vals)))
    diff = a.mean - b.mean
    d = float(diff @ diff + np.trace(a.cov) + np.trace(b.cov) - 2 * tr_root)
    return max(d, 0.0)


def davies_bouldin(features, labels):
    """Mean over clusters of ``max_j (S_i + S_j) / M_ij`` with Euclidean distances.

    ``S_i`` is the mean distance of cluster i's points to its centroid and
    ``M_ij`` the centroid separation. Ties in the max go to the larger j.
    """
    x = np.asarray(features, dtype=np.float64)
    labels = np.asarray(labels)
    if x.ndim == 1:
        x = x[:, None]
    if len(x) != len(labels):
        raise ShapeError("one label per feature row is required")
    ids = np.unique(labels)
    if len(ids) < 2:
        raise DegenerateClusteringError("need at least two clusters")
    cents = np.stack([x[labels == k].mean(axis=0) for k in ids])
    scatter = np.array([np.linalg.norm(x[labels == k] - c, axis=1).mean() for k, c in zip(ids, cents)])
    sep = np.linalg.norm(cents[:, None] - cents[None], axis=2)
    total = 0.0
    for i in range(len(ids)):
        best = -np.inf
        for j in range(len(ids)):
            if j == i:
                continue
            if sep[i, j] == 0:
                raise DegenerateClusteringError(f"clusters {ids[i]} and {ids[j]} share a centroid")
            r = (scatter[i] + scatter[j]) / sep[i, j]
            if r >= best:
                best = r
        total += best
    return float(total / len(ids))


def bits_per_dim(nll_nats, dims):
    return float(nll_nats) / (dims * math.log(2))


@dataclasses.dataclass
class NllReport:
    bits_per_dim: float
    n: int
    failures: int
    excluded: list
    is_bound: bool


def nll_report(model, x, h, stream):
    """Average negative log-likelihood in bits/dim over the samples that evaluated.

    VAE results are the negative ELBO and flagged ``is_bound``. Samples whose
    likelihood is non-finite (flow overflow) are counted and listed, not averaged.
    """
    nats = np.asarray(model.nll(x, h, stream), dtype=np.float64)
    dims = int(np.prod(np.asarray(x).shape[1:]))
    bad = ~np.isfinite(nats)
    excluded = [int(i) for i in np.flatnonzero(bad)]
    ok = nats[~bad]
    bpd = bits_per_dim(ok.mean(), dims) if len(ok) else float("nan")
    return NllReport(bpd, int(len(ok)), int(bad.sum()), excluded, bool(getattr(model, "nll_is_bound", False)))


def format_metric(name, value, std=0.0, n=0, seed=0):
    return f"metric={name} value={float(value)!r} std={float(std)!r} n={int(n)} seed={int(seed)}\n"


def parse_metrics(text):
    """Metric report lines -> ``{name: {"value", "std", "n", "seed"}}``."""
    out = {}
    for line in text.splitlines():
        if not line.strip():
            continue
        fields = dict(part.split("=", 1) for part in line.split())
        name = fields.pop("metric")
        out[name] = {k: (int(v) if k in ("n", "seed", "failures") else float(v)) for k, v in fields.items()}
    return out


def model_checksum(model):
    """SHA-256 over parameter names, shapes and bytes; pins a frozen evaluation classifier."""
    h = hashlib.sha256()
    for name, p in model.named_parameters():
        h.update(name.encode())
        h.update(str(p.data.shape).encode())
        h.update(np.ascontiguousarray(p.data).tobytes())
    return h.hexdigest()
