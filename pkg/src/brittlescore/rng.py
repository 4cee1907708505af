"""Seeded random streams with deterministic derivation for parallel work."""

from __future__ import annotations

import numpy as np

_MAX_SEED = 2**64
_MAX_INDEX = 2**32


class SeededRng:
    """A PCG64 stream addressed by a 64-bit seed plus a derivation path.

    The same seed yields the same sample stream on every platform. An
    instance is single-owner: concurrent workers must each hold their own
    stream obtained through ``derive``, never share one generator.
    """

    def __init__(self, seed: int, _path: tuple[int, ...] = ()):
        seed = int(seed)
        if not 0 <= seed < _MAX_SEED:
            raise ValueError(f"seed must be an unsigned 64-bit integer, got {seed}")
        self.seed = seed
        self._path = _path
        self._gen = np.random.Generator(
            np.random.PCG64(np.random.SeedSequence(seed, spawn_key=_path))
        )

    def derive(self, index: int) -> SeededRng:
        """Independent stream for ``index``; distinct indices never collide."""
        index = int(index)
        if not 0 <= index < _MAX_INDEX:
            raise ValueError(f"derivation index must be in [0, 2^32), got {index}")
        return SeededRng(self.seed, self._path + (index,))

    def standard_normal(self, size=None) -> np.ndarray:
        return self._gen.standard_normal(size)

    def uniform(self, low: float = 0.0, high: float = 1.0, size=None) -> np.ndarray:
        return self._gen.uniform(low, high, size)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    def integers(self, low: int, high: int, size=None) -> np.ndarray:
        return self._gen.integers(low, high, size=size)

    def __repr__(self) -> str:
        return f"SeededRng(seed={self.seed}, path={self._path})"
