"""Seeded xoshiro256** generator with Box-Muller normals.

The algorithm is fixed so that streams are reproducible across machines and
across the compiled and pure-Python kernels. State is initialized from the
seed with splitmix64; independent streams for the same seed are derived by
mixing a stream counter into the seed before expansion.
"""

from __future__ import annotations

import numpy as np

from . import _kernels

_MASK = (1 << 64) - 1
_GOLDEN = 0x9E3779B97F4A7C15


def splitmix64(x: int) -> tuple[int, int]:
    """One splitmix64 step: returns (output, next_state)."""
    x = (x + _GOLDEN) & _MASK
    z = x
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK
    return z ^ (z >> 31), x


class Rng:
    def __init__(self, seed: int, stream: int = 0):
        x = (int(seed) ^ ((int(stream) * _GOLDEN) & _MASK)) & _MASK
        words = []
        for _ in range(4):
            out, x = splitmix64(x)
            words.append(out)
        if not any(words):
            words[0] = 1
        self.state = np.array(words, dtype=np.uint64)
        self.seed = int(seed)
        self.stream = int(stream)

    def next_u64(self) -> int:
        return _kernels.xoshiro_next_u64(self.state)

    def uniform(self, shape=()) -> np.ndarray:
        """Doubles in [0, 1) from the top 53 bits of each draw."""
        n = int(np.prod(shape)) if shape != () else 1
        out = np.empty(n)
        _kernels.xoshiro_uniform_fill(self.state, out)
        return out.reshape(shape) if shape != () else out[0]

    def normal(self, shape=(), std: float = 1.0, mean: float = 0.0) -> np.ndarray:
        n = int(np.prod(shape)) if shape != () else 1
        out = np.empty(n)
        _kernels.xoshiro_normal_fill(self.state, out)
        out = mean + std * out
        return out.reshape(shape) if shape != () else out[0]

    def permutation(self, n: int) -> np.ndarray:
        """Fisher-Yates shuffle of ``range(n)``."""
        p = np.arange(n)
        for i in range(n - 1, 0, -1):
            j = self.next_u64() % (i + 1)
            p[i], p[j] = p[j], p[i]
        return p
