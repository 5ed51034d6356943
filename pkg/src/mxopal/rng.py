"""Portable, counter-based 64-bit PRNG for reproducible synthetic data.

The generator is SplitMix64 used in counter mode: the i-th raw output of a
stream is

    out_i = mix(key + (i + 1) * 0x9E3779B97F4A7C15)   (mod 2^64)

where mix() is the SplitMix64 finalizer and key = mix(seed ^ mix(stream_id)).
Because each output depends only on (seed, stream_id, i), batches vectorize
in numpy and any other implementation of SplitMix64 reproduces the streams
exactly. Derived samplers:

  * uniforms:  ((out >> 11) + 1) * 2^-53, in (0, 1]
  * gaussians: Box-Muller on consecutive uniform pairs (2j, 2j+1)
"""

from __future__ import annotations

import numpy as np

_GAMMA = np.uint64(0x9E3779B97F4A7C15)
_MIX1 = np.uint64(0xBF58476D1CE4E5B9)
_MIX2 = np.uint64(0x94D049BB133111EB)


def _mix(z: np.ndarray) -> np.ndarray:
    """SplitMix64 output function on uint64 values (wrapping arithmetic)."""
    z = (z ^ (z >> np.uint64(30))) * _MIX1
    z = (z ^ (z >> np.uint64(27))) * _MIX2
    return z ^ (z >> np.uint64(31))


class Stream:
    """One deterministic random stream identified by (seed, stream_id).

    Draw methods consume a fixed number of counter slots per call, so the
    sequence of values depends only on the sizes requested, never on timing
    or interleaving with other streams.
    """

    def __init__(self, seed: int, stream_id: int = 0):
        seed64 = np.uint64(seed & 0xFFFFFFFFFFFFFFFF)
        sid64 = np.uint64(stream_id & 0xFFFFFFFFFFFFFFFF)
        with np.errstate(over="ignore"):
            self._key = _mix(seed64 ^ _mix(sid64))
        self._counter = 0

    def next_u64(self, count: int) -> np.ndarray:
        """Next `count` raw 64-bit outputs."""
        if count < 0:
            raise ValueError("count must be nonnegative")
        idx = np.arange(self._counter + 1, self._counter + count + 1, dtype=np.uint64)
        self._counter += count
        with np.errstate(over="ignore"):
            return _mix(self._key + idx * _GAMMA)

    def uniform(self, count: int) -> np.ndarray:
        """Uniform float64 samples in (0, 1]."""
        bits = self.next_u64(count)
        return ((bits >> np.uint64(11)).astype(np.float64) + 1.0) * 2.0**-53

    def gaussian(self, count: int) -> np.ndarray:
        """Standard-normal float64 samples via Box-Muller on uniform pairs."""
        pairs = (count + 1) // 2
        u = self.uniform(2 * pairs)
        u1, u2 = u[0::2], u[1::2]
        r = np.sqrt(-2.0 * np.log(u1))
        theta = 2.0 * np.pi * u2
        z = np.empty(2 * pairs, dtype=np.float64)
        z[0::2] = r * np.cos(theta)
        z[1::2] = r * np.sin(theta)
        return z[:count]

    def bernoulli(self, count: int, p: float) -> np.ndarray:
        """Boolean samples, true with probability p."""
        return self.uniform(count) <= p
