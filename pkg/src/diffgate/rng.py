"""Seeded, named random streams.

Each stream is a numpy ``Generator`` over PCG64, keyed by ``(seed, name)``
through ``SeedSequence``. Naming a stream isolates its draws, so adding a
consumer in one component never shifts the samples seen by another.
"""
from __future__ import annotations

import hashlib

import numpy as np

ALGORITHM = "pcg64"
U_EPS = 1e-12


def _name_key(name: str) -> tuple[int, ...]:
    digest = hashlib.sha256(name.encode("utf-8")).digest()
    return tuple(int.from_bytes(digest[i:i + 4], "little") for i in range(0, 16, 4))


class RngState:
    algorithm = ALGORITHM

    def __init__(self, seed: int, name: str = ""):
        if seed < 0 or seed >= 2**64:
            raise ValueError("seed must be an unsigned 64-bit integer")
        self.seed = int(seed)
        self.name = name
        ss = np.random.SeedSequence(self.seed, spawn_key=_name_key(name) if name else ())
        self._gen = np.random.Generator(np.random.PCG64(ss))

    def __repr__(self):
        return f"RngState(seed={self.seed}, name={self.name!r})"

    def stream(self, name: str) -> RngState:
        """Independent child stream; depends only on the seed and the full name."""
        return RngState(self.seed, f"{self.name}/{name}" if self.name else name)

    @property
    def generator(self) -> np.random.Generator:
        return self._gen

    def uniform_open(self, shape) -> np.ndarray:
        """U(0,1) draws clamped to [1e-12, 1 - 1e-12] so both logs stay finite."""
        return np.clip(self._gen.random(shape), U_EPS, 1.0 - U_EPS)

    def normal(self, shape, std: float = 1.0, mean: float = 0.0) -> np.ndarray:
        return self._gen.normal(mean, std, size=shape)

    def integers(self, low: int, high: int, size=None) -> np.ndarray:
        return self._gen.integers(low, high, size=size)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)
