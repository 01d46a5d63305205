"""Portable noise PRNG.

Every sample owns an independent xorshift64* stream whose state comes from
SplitMix64 applied to ``(seed, stream_index)``::

    state = splitmix64(splitmix64(seed) ^ stream_index)    # 0 is replaced by GOLDEN
    x ^= x >> 12; x ^= x << 25; x ^= x >> 27
    out = x * 0x2545F4914F6CDD1D            (mod 2**64)
    u   = (out >> 11) * 2**-53              uniform in [0, 1)

Only 64-bit integer arithmetic is involved, so any language reproduces the
same doubles. Streams for many samples are advanced together as numpy
uint64 vectors; results do not depend on how samples are grouped.
"""

from __future__ import annotations

import numpy as np

MASK = (1 << 64) - 1
GOLDEN = 0x9E3779B97F4A7C15
XS_MULT = 0x2545F4914F6CDD1D


def splitmix64(x: int) -> int:
    z = (x + GOLDEN) & MASK
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK
    return z ^ (z >> 31)


def stream_state(seed: int, stream_index: int) -> int:
    s = splitmix64(splitmix64(seed & MASK) ^ (stream_index & MASK))
    return s or GOLDEN


class XorShift64Star:
    """Scalar reference generator; :func:`uniform_streams` is the vectorised twin."""

    def __init__(self, state: int):
        if state == 0:
            raise ValueError("xorshift64* state must be nonzero")
        self.state = state & MASK

    def next_u64(self) -> int:
        x = self.state
        x ^= x >> 12
        x ^= (x << 25) & MASK
        x ^= x >> 27
        self.state = x
        return (x * XS_MULT) & MASK

    def uniform(self) -> float:
        return (self.next_u64() >> 11) * 2.0**-53


def uniform_streams(seed: int, stream_indices, n: int) -> np.ndarray:
    """``n`` uniforms from each stream, shape [len(stream_indices), n]."""
    idx = [int(i) for i in np.asarray(stream_indices).reshape(-1)]
    x = np.array([stream_state(seed, i) for i in idx], dtype=np.uint64)
    out = np.empty((len(idx), n), dtype=np.float64)
    s12, s25, s27, s11 = np.uint64(12), np.uint64(25), np.uint64(27), np.uint64(11)
    mult = np.uint64(XS_MULT)
    scale = 2.0**-53
    with np.errstate(over="ignore"):
        for k in range(n):
            x ^= x >> s12
            x ^= x << s25
            x ^= x >> s27
            out[:, k] = ((x * mult) >> s11).astype(np.float64) * scale
    return out
