"""Seedable, splittable, counter-based random number generation.

The generator is a splitmix-style 64-bit mixer applied to a counter: draw i
of a stream with key s is mix64(s + (i+1) * GOLDEN). Because the stream is a
pure function of (key, counter), whole blocks of draws can be produced
vectorized, and child streams derived from a parent by label never collide
with the parent's own draws. Every source of randomness in the package
(weight init, scene generation, evaluation batches) flows from one of these
streams, so a run is fully determined by its seed.
"""

from __future__ import annotations

import numpy as np

_MASK = np.uint64(0xFFFFFFFFFFFFFFFF)
_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_MIX1 = np.uint64(0xBF58476D1CE4E5B9)
_MIX2 = np.uint64(0x94D049BB133111EB)


def mix64(z: int) -> int:
    """splitmix64 finalizer: bijective avalanche mix of a 64-bit word."""
    with np.errstate(over="ignore"):
        z = np.uint64(z & 0xFFFFFFFFFFFFFFFF)
        z = (z ^ (z >> np.uint64(30))) * _MIX1
        z = (z ^ (z >> np.uint64(27))) * _MIX2
        return int(z ^ (z >> np.uint64(31)))


def _mix_vec(z: np.ndarray) -> np.ndarray:
    z = (z ^ (z >> np.uint64(30))) * _MIX1
    z = (z ^ (z >> np.uint64(27))) * _MIX2
    return z ^ (z >> np.uint64(31))


class CounterRng:
    """Counter-based splitmix64 stream.

    Stateful interface over the pure counter scheme: each call consumes a
    block of counters. `child(label)` derives an independent stream whose
    key depends only on (key, label), not on how much of this stream has
    been consumed - use it to give each concern (weights, scenes, eval)
    its own stream.
    """

    def __init__(self, seed: int, counter: int = 0):
        self.key = int(seed) & 0xFFFFFFFFFFFFFFFF
        self.counter = int(counter)

    def _raw(self, n: int) -> np.ndarray:
        with np.errstate(over="ignore"):
            idx = np.arange(self.counter + 1, self.counter + n + 1, dtype=np.uint64)
            states = np.uint64(self.key) + idx * _GOLDEN
            out = _mix_vec(states)
        self.counter += n
        return out

    def next_u64(self) -> int:
        return int(self._raw(1)[0])

    def child(self, label: int) -> "CounterRng":
        """Independent stream keyed by (self.key, label); does not consume."""
        return CounterRng(mix64(self.key ^ mix64(label & 0xFFFFFFFFFFFFFFFF) ^ 0xA5A5A5A5A5A5A5A5))

    def split(self) -> "CounterRng":
        """Independent stream seeded from the next draw (consumes one)."""
        return CounterRng(self.next_u64())

    def uniform(self, shape=(), low: float = 0.0, high: float = 1.0) -> np.ndarray:
        n = int(np.prod(shape)) if shape else 1
        u = (self._raw(n) >> np.uint64(11)).astype(np.float64) * (2.0 ** -53)
        out = low + (high - low) * u
        return out.reshape(shape) if shape else out[0]

    def normal(self, shape=()) -> np.ndarray:
        """Standard normal via Box-Muller; consumes 2*ceil(n/2) draws."""
        n = int(np.prod(shape)) if shape else 1
        m = (n + 1) // 2
        raw = self._raw(2 * m)
        # u1 in (0, 1] so log is finite
        u1 = ((raw[:m] >> np.uint64(11)).astype(np.float64) + 1.0) * (2.0 ** -53)
        u2 = (raw[m:] >> np.uint64(11)).astype(np.float64) * (2.0 ** -53)
        r = np.sqrt(-2.0 * np.log(u1))
        theta = 2.0 * np.pi * u2
        z = np.concatenate([r * np.cos(theta), r * np.sin(theta)])[:n]
        return z.reshape(shape) if shape else z[0]

    def randint(self, low: int, high: int) -> int:
        """Uniform integer in [low, high] inclusive."""
        span = high - low + 1
        return low + self.next_u64() % span

    def choice(self, options):
        return options[self.randint(0, len(options) - 1)]
