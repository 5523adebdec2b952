"""Seeded random streams.

A :class:`Stream` wraps numpy's PCG64 generator seeded through a
``SeedSequence``. Child streams are derived from string/integer keys, so
independent consumers (weight init, codebooks, each training epoch) never
share draws and never depend on call order.
"""
import zlib

import numpy as np


def _key_int(part):
    if isinstance(part, (int, np.integer)):
        if part < 0:
            raise ValueError("stream keys must be non-negative")
        return int(part)
    return zlib.crc32(str(part).encode("utf-8"))


class Stream:
    def __init__(self, seed, *key):
        self.seed = int(seed)
        self.key = tuple(_key_int(k) for k in key)
        ss = np.random.SeedSequence(self.seed, spawn_key=self.key)
        self._gen = np.random.Generator(np.random.PCG64(ss))

    def child(self, *key):
        return Stream(self.seed, *self.key, *(_key_int(k) for k in key))

    @property
    def generator(self):
        return self._gen

    def uniform(self, size=None, low=0.0, high=1.0, dtype=np.float64):
        out = self._gen.uniform(low, high, size)
        return dtype(out) if size is None else out.astype(dtype, copy=False)

    def normal(self, size=None, dtype=np.float64):
        out = self._gen.standard_normal(size)
        return dtype(out) if size is None else out.astype(dtype, copy=False)

    def bernoulli(self, p, size=None):
        return (self._gen.random(size) < p).astype(np.uint8)

    def categorical(self, probs, size=None):
        probs = np.asarray(probs, dtype=np.float64)
        return self._gen.choice(len(probs), size=size, p=probs)

    def integers(self, low, high=None, size=None):
        return self._gen.integers(low, high, size)

    def dirichlet(self, alpha, size=None):
        return self._gen.dirichlet(np.asarray(alpha, dtype=np.float64), size)

    def permutation(self, n):
        return self._gen.permutation(n)

    def bits(self, size):
        return self._gen.integers(0, 2, size, dtype=np.uint8)
