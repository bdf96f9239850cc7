"""Reproducible random streams.

Every stochastic routine accepts either an ``RngStream`` (a ``(seed, stream)``
pair) or an already constructed ``numpy.random.Generator``. Passing an
``RngStream`` makes the call a pure function of its inputs: a fresh PCG64
generator is derived from ``SeedSequence(seed, spawn_key=(stream,))`` on every
call.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Union

import numpy as np


@dataclass(frozen=True)
class RngStream:
    seed: int
    stream: int = 0

    def __post_init__(self):
        if self.seed < 0 or self.stream < 0:
            raise ValueError("seed and stream must be unsigned integers")

    def generator(self) -> np.random.Generator:
        seq = np.random.SeedSequence(self.seed, spawn_key=(self.stream,))
        return np.random.Generator(np.random.PCG64(seq))

    def child(self, index: int) -> "RngStream":
        """Derive an independent stream, e.g. one per chain or per fold."""
        # Cantor pairing keeps (stream, index) -> stream injective.
        s, i = self.stream, index
        return RngStream(self.seed, (s + i) * (s + i + 1) // 2 + i + 1)


RngLike = Union[RngStream, np.random.Generator, int]


def as_generator(rng: RngLike) -> np.random.Generator:
    if isinstance(rng, np.random.Generator):
        return rng
    if isinstance(rng, RngStream):
        return rng.generator()
    if isinstance(rng, (int, np.integer)):
        return RngStream(int(rng)).generator()
    raise TypeError(f"cannot build a generator from {type(rng).__name__}")
