"""Seeded 2-universal hashing of tokens into sketch buckets.

A token is first reduced to a 64-bit fingerprint (FNV-1a over its bytes,
then a splitmix64 avalanche). Row ``n`` maps a fingerprint ``x`` to
``((a_n * x + b_n) mod p) mod J`` with ``p = 2**61 - 1``. The pairs
``(a_n, b_n)`` come from a splitmix64 counter stream keyed by the seed, so a
sketch file only needs ``(seed, N, J)`` to recover its hash functions.
See ``docs/format.md`` for the byte-level description.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

MASK64 = (1 << 64) - 1
MERSENNE_61 = (1 << 61) - 1

_FNV_OFFSET = 0xCBF29CE484222325
_FNV_PRIME = 0x100000001B3
_GOLDEN_GAMMA = 0x9E3779B97F4A7C15


def splitmix64_mix(z):
    """The splitmix64 finalizer on a 64-bit integer."""
    z &= MASK64
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
    return z ^ (z >> 31)


def fingerprint(token):
    """64-bit fingerprint of a non-empty token.

    ``str`` tokens are encoded as UTF-8 first.
    """
    if isinstance(token, str):
        token = token.encode("utf-8")
    if not isinstance(token, (bytes, bytearray, memoryview)):
        raise TypeError("token must be bytes or str")
    data = bytes(token)
    if not data:
        raise ValueError("cannot fingerprint an empty token")
    h = _FNV_OFFSET
    for byte in data:
        h = ((h ^ byte) * _FNV_PRIME) & MASK64
    return splitmix64_mix(h)


def splitmix64_stream(seed):
    """Infinite generator of splitmix64 outputs for ``seed``."""
    state = seed & MASK64
    while True:
        state = (state + _GOLDEN_GAMMA) & MASK64
        yield splitmix64_mix(state)


@dataclass(frozen=True)
class HashFamily:
    """Immutable Carter-Wegman hash family with ``depth`` rows of ``width`` buckets."""

    seed: int
    depth: int
    width: int
    rows: tuple
    prime_modulus: int = MERSENNE_61

    def bucket(self, row, fp):
        if not 0 <= row < self.depth:
            raise IndexError(f"row {row} out of range for depth {self.depth}")
        a, b = self.rows[row]
        return ((a * fp + b) % self.prime_modulus) % self.width

    def buckets(self, fp):
        """Bucket index in every row for one fingerprint."""
        p, w = self.prime_modulus, self.width
        return [((a * fp + b) % p) % w for a, b in self.rows]

    def bucket_matrix(self, fingerprints):
        """``(N, len(fingerprints))`` int64 array of bucket indices."""
        out = np.empty((self.depth, len(fingerprints)), dtype=np.int64)
        p, w = self.prime_modulus, self.width
        for n, (a, b) in enumerate(self.rows):
            out[n] = [((a * fp + b) % p) % w for fp in fingerprints]
        return out


def make_hash_family(seed, depth, width):
    """Derive ``depth`` pairs ``(a, b)`` with ``1 <= a < p`` and ``0 <= b < p``.

    Each candidate is the top 61 bits of the next splitmix64 output; values
    outside the allowed range are skipped.
    """
    seed = int(seed)
    depth = int(depth)
    width = int(width)
    if depth < 1 or width < 1:
        raise ValueError("depth and width must both be at least 1")
    if not 0 <= seed <= MASK64:
        raise ValueError("seed must be an unsigned 64-bit integer")
    gen = splitmix64_stream(seed)

    def draw(low):
        while True:
            v = next(gen) >> 3
            if low <= v < MERSENNE_61:
                return v

    rows = []
    for _ in range(depth):
        a = draw(1)
        b = draw(0)
        rows.append((a, b))
    return HashFamily(seed, depth, width, tuple(rows))


def hash_row(family, row, fp):
    """Bucket of fingerprint ``fp`` in row ``row`` of ``family``."""
    return family.bucket(row, fp)
