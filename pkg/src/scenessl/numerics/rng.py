"""Seeded random streams.

All randomness goes through :class:`Rng`, a thin wrapper over numpy's PCG64
bit generator seeded through ``SeedSequence``. PCG64 output for a given seed
is fixed by numpy's stream-compatibility policy and does not depend on the
platform.

Splitting rule: ``Rng(seed).child(*labels)`` seeds a new PCG64 from
``SeedSequence(entropy=seed, spawn_key=keys)`` where string labels map to
``zlib.crc32(label.encode())`` and integers are used as-is. The child depends
only on the root seed and the label path, never on how many numbers the
parent has already drawn.
"""

from __future__ import annotations

import zlib

import numpy as np

ALGORITHM = "PCG64/SeedSequence"


def _key(label) -> int:
    if isinstance(label, (int, np.integer)):
        if label < 0:
            raise ValueError(f"rng labels must be non-negative, got {label}")
        return int(label)
    return zlib.crc32(str(label).encode("utf-8"))


class Rng:
    def __init__(self, seed: int, path: tuple[int, ...] = ()):
        if not 0 <= int(seed) < 2**64:
            raise ValueError(f"seed must be a 64-bit unsigned integer, got {seed}")
        self.seed = int(seed)
        self.path = tuple(path)
        self._gen = np.random.Generator(np.random.PCG64(np.random.SeedSequence(self.seed, spawn_key=self.path)))

    def child(self, *labels) -> "Rng":
        return Rng(self.seed, self.path + tuple(_key(x) for x in labels))

    @property
    def generator(self) -> np.random.Generator:
        return self._gen

    # state round-trip for checkpoints
    def state(self) -> dict:
        return {"seed": self.seed, "path": list(self.path), "bit_generator": self._gen.bit_generator.state}

    @classmethod
    def from_state(cls, state: dict) -> "Rng":
        rng = cls(state["seed"], tuple(state["path"]))
        rng._gen.bit_generator.state = state["bit_generator"]
        return rng

    # convenience draws
    def uniform(self, low=0.0, high=1.0, size=None):
        return self._gen.uniform(low, high, size)

    def normal(self, loc=0.0, scale=1.0, size=None):
        return self._gen.normal(loc, scale, size)

    def random(self, size=None):
        return self._gen.random(size)

    def integers(self, low, high=None, size=None):
        return self._gen.integers(low, high, size)

    def permutation(self, n):
        return self._gen.permutation(n)

    def exponential(self, scale=1.0, size=None):
        return self._gen.exponential(scale, size)

    def __repr__(self) -> str:
        return f"Rng(seed={self.seed}, path={self.path})"
