"""Portable seeded random numbers: xoshiro256** seeded through SplitMix64.

Every random draw in the package (weight init, crop corners, epoch shuffles)
comes from this generator, so fixtures can be regenerated bit-exactly in any
language.  The exact derivations are:

* seeding: the four state words are the first four SplitMix64 outputs for
  the SplitMix64 state ``seed mod 2**64``;
* ``random()``: ``(next_u64() >> 11) * 2**-53``;
* ``below(n)``: ``next_u64() % n`` after rejecting draws ``>= 2**64 - (2**64 % n)``;
* ``permutation(n)``: Fisher-Yates from the top, ``j = below(i + 1)`` for
  ``i = n-1 .. 1``;
* ``for_stream(seed, stream)``: a generator seeded with
  ``mix64(seed ^ mix64(stream + 1))`` where ``mix64`` is the SplitMix64
  output finalizer.
"""
import struct

import numpy as np

_MASK = (1 << 64) - 1
_GOLDEN = 0x9E3779B97F4A7C15


def mix64(z):
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK
    return z ^ (z >> 31)


def splitmix64(state):
    """Advance a SplitMix64 state; returns ``(new_state, output)``."""
    state = (state + _GOLDEN) & _MASK
    return state, mix64(state)


def _rotl(x, k):
    return ((x << k) | (x >> (64 - k))) & _MASK


class Xoshiro256:
    def __init__(self, seed=0):
        s = seed & _MASK
        words = []
        for _ in range(4):
            s, out = splitmix64(s)
            words.append(out)
        self._s = words

    @classmethod
    def for_stream(cls, seed, stream):
        return cls(mix64((seed & _MASK) ^ mix64((stream + 1) & _MASK)))

    def next_u64(self):
        s0, s1, s2, s3 = self._s
        result = (_rotl((s1 * 5) & _MASK, 7) * 9) & _MASK
        t = (s1 << 17) & _MASK
        s2 ^= s0
        s3 ^= s1
        s1 ^= s2
        s0 ^= s3
        s2 ^= t
        s3 = _rotl(s3, 45)
        self._s = [s0, s1, s2, s3]
        return result

    def random(self):
        return (self.next_u64() >> 11) * (1.0 / (1 << 53))

    def below(self, n):
        if n < 1:
            raise ValueError(f"below() needs n >= 1, got {n}")
        limit = (1 << 64) - ((1 << 64) % n)
        while True:
            r = self.next_u64()
            if r < limit:
                return r % n

    def permutation(self, n):
        order = list(range(n))
        for i in range(n - 1, 0, -1):
            j = self.below(i + 1)
            order[i], order[j] = order[j], order[i]
        return order

    def uniform(self, shape, low, high, dtype=np.float32):
        """Array of draws ``low + (high - low) * random()`` in row-major order."""
        count = int(np.prod(shape, dtype=np.int64))
        span = high - low
        values = [low + span * self.random() for _ in range(count)]
        return np.array(values, dtype=np.float64).astype(dtype).reshape(shape)

    @property
    def state(self):
        return tuple(self._s)

    @state.setter
    def state(self, words):
        words = [int(w) & _MASK for w in words]
        if len(words) != 4 or not any(words):
            raise ValueError("xoshiro256 state must be four words, not all zero")
        self._s = words

    def to_bytes(self):
        return struct.pack("<4Q", *self._s)

    @classmethod
    def from_bytes(cls, blob):
        if len(blob) != 32:
            raise ValueError(f"xoshiro256 state blob must be 32 bytes, got {len(blob)}")
        rng = cls.__new__(cls)
        rng.state = struct.unpack("<4Q", blob)
        return rng
