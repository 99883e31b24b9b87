"""Deterministic, splittable random streams.

Every stochastic component of a run pulls from its own stream, identified by
(seed, stream_id). Streams are backed by the counter-based Philox generator,
keyed by the pair, so child streams never share state with their parent and
the same pair always replays the same sequence. Gaussian draws use Box-Muller
on the stream's uniforms so the bit sequence does not depend on the host
library's normal sampler.
"""

from __future__ import annotations

import math

import numpy as np

_MASK64 = 0xFFFFFFFFFFFFFFFF
_GOLDEN = 0x9E3779B97F4A7C15


def _mix64(z: int) -> int:
    """SplitMix64 finalizer; bijective on 64-bit ints."""
    z = (z + _GOLDEN) & _MASK64
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return z ^ (z >> 31)


class SplitRng:
    """A (seed, stream_id)-keyed random stream.

    ``split(label)`` derives an independent child stream deterministically
    from the parent's identity and the label, without consuming any draws
    from the parent.
    """

    def __init__(self, seed: int, stream_id: int = 0):
        self.seed = int(seed) & _MASK64
        self.stream_id = int(stream_id) & _MASK64
        key = np.array([self.seed, self.stream_id], dtype=np.uint64)
        self._gen = np.random.Generator(np.random.Philox(key=key))

    def __repr__(self):
        return f"SplitRng(seed={self.seed}, stream_id={self.stream_id})"

    def split(self, label: int) -> "SplitRng":
        child_id = _mix64(self.stream_id ^ _mix64(int(label) & _MASK64))
        return SplitRng(self.seed, child_id)

    def uniform(self, size=None) -> np.ndarray:
        """Uniform draws on [0, 1)."""
        return self._gen.random(size)

    def normal(self, size=None) -> np.ndarray:
        """Standard-normal draws via Box-Muller."""
        shape = () if size is None else (
            (size,) if isinstance(size, int) else tuple(size))
        n = int(np.prod(shape)) if shape else 1
        m = (n + 1) // 2
        u1 = 1.0 - self._gen.random(m)  # (0, 1]: log is safe
        u2 = self._gen.random(m)
        r = np.sqrt(-2.0 * np.log(u1))
        ang = 2.0 * math.pi * u2
        z = np.concatenate([r * np.cos(ang), r * np.sin(ang)])[:n]
        return z.reshape(shape) if shape else float(z[0])

    def integers(self, low: int, high: int, size=None) -> np.ndarray:
        return self._gen.integers(low, high, size=size)
