"""Deterministic, splittable random streams.

Everything stochastic in this package draws from an `Rng`, which wraps a
counter-based generator (Philox) keyed by a root seed plus a path of
stream ids. The same (seed, path) yields the same stream on any platform,
and streams with different paths are statistically independent, so
components (data collection, model init, relabeling, ...) can be reseeded
without disturbing each other.
"""

from __future__ import annotations

import hashlib

import numpy as np

from .errors import ConfigError

_MASK64 = (1 << 64) - 1


def _key_to_int(key) -> int:
    if isinstance(key, (int, np.integer)):
        if key < 0:
            raise ConfigError(f"stream ids must be non-negative, got {key}")
        return int(key)
    digest = hashlib.sha256(str(key).encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little") & _MASK64


class Rng:
    """A named random stream derived from (seed, path of stream ids)."""

    def __init__(self, seed: int, _path: tuple = ()):
        if not isinstance(seed, (int, np.integer)) or seed < 0:
            raise ConfigError(f"seed must be a non-negative integer, got {seed!r}")
        self.seed = int(seed)
        self.path = tuple(_path)
        entropy = (self.seed,) + tuple(_key_to_int(k) for k in self.path)
        self._gen = np.random.Generator(np.random.Philox(np.random.SeedSequence(entropy)))

    def split(self, *keys) -> "Rng":
        """Derive an independent substream; does not consume from this one."""
        return Rng(self.seed, self.path + tuple(keys))

    # Thin delegates to the underlying generator.
    def uniform(self, low=0.0, high=1.0, size=None):
        return self._gen.uniform(low, high, size)

    def normal(self, loc=0.0, scale=1.0, size=None):
        return self._gen.normal(loc, scale, size)

    def standard_normal(self, size=None):
        return self._gen.standard_normal(size)

    def integers(self, low, high=None, size=None):
        return self._gen.integers(low, high, size)

    def choice(self, a, size=None, replace=True):
        return self._gen.choice(a, size=size, replace=replace)

    def permutation(self, n):
        return self._gen.permutation(n)

    def __repr__(self):
        return f"Rng(seed={self.seed}, path={self.path})"
