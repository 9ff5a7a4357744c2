"""Portable pseudo-random streams.

BRIEF test patterns must be identical across platforms and implementations,
so they come from a fully specified xorshift64* generator rather than
numpy's bit generators:

    state ^= state >> 12
    state ^= state << 25      (mod 2**64)
    state ^= state >> 27
    output = state * 0x2545F4914F6CDD1D   (mod 2**64)

The initial state is ``splitmix64(seed)`` (forced non-zero). Uniform doubles
take the top 53 output bits; normals use the cosine branch of Box-Muller on
two consecutive uniforms, ``u1`` mapped to ``(0, 1]``.
"""
from __future__ import annotations

import hashlib
import math

MASK64 = (1 << 64) - 1


def splitmix64(x: int) -> int:
    x = (x + 0x9E3779B97F4A7C15) & MASK64
    x = ((x ^ (x >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    x = ((x ^ (x >> 27)) * 0x94D049BB133111EB) & MASK64
    return x ^ (x >> 31)


class XorShift64Star:
    def __init__(self, seed: int):
        self.state = splitmix64(seed & MASK64) or 0x9E3779B97F4A7C15

    def next_u64(self) -> int:
        s = self.state
        s ^= s >> 12
        s ^= (s << 25) & MASK64
        s ^= s >> 27
        self.state = s
        return (s * 0x2545F4914F6CDD1D) & MASK64

    def uniform(self) -> float:
        """Uniform double in [0, 1)."""
        return (self.next_u64() >> 11) * (1.0 / (1 << 53))

    def normal(self, sigma: float = 1.0) -> float:
        u1 = 1.0 - self.uniform()
        u2 = self.uniform()
        return sigma * math.sqrt(-2.0 * math.log(u1)) * math.cos(2.0 * math.pi * u2)


def derive_seed(seed: int, *labels) -> int:
    """Expand a top-level seed into an independent 63-bit component seed."""
    text = "/".join([str(int(seed))] + [str(label) for label in labels])
    return int.from_bytes(hashlib.sha256(text.encode()).digest()[:8], "little") >> 1
