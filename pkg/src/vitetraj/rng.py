"""Counter-based random streams.

Every draw is produced by a fresh generator keyed on ``(seed, stream, counter)``
and then the counter advances by one, so a stream can be checkpointed as two
integers and replayed exactly.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

# stream ids used by the training harness
STREAM_INIT = 0
STREAM_TRAIN = 1
STREAM_DATA = 2


@dataclass
class RngStream:
    seed: int
    counter: int = 0
    stream: int = 0

    def _next(self) -> np.random.Generator:
        gen = np.random.Generator(
            np.random.PCG64(np.random.SeedSequence([self.seed & 0xFFFFFFFFFFFFFFFF, self.stream, self.counter]))
        )
        self.counter += 1
        return gen

    def normal(self, shape, std=1.0) -> np.ndarray:
        return self._next().standard_normal(shape) * std

    def uniform(self, low=0.0, high=1.0, shape=None):
        return self._next().uniform(low, high, shape)

    def integers(self, low, high, shape=None):
        return self._next().integers(low, high, shape)

    def permutation(self, n: int) -> np.ndarray:
        return self._next().permutation(n)

    def spawn(self, stream: int) -> "RngStream":
        """Independent stream sharing this seed."""
        return RngStream(self.seed, 0, stream)
