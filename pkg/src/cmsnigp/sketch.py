"""Count-min sketch: counter table, classical estimators, merge and file format."""

from __future__ import annotations

import struct
from collections import Counter
from dataclasses import dataclass

import numpy as np

from cmsnigp.errors import SketchFormatError
from cmsnigp.hashing import HashFamily, MASK64, fingerprint, make_hash_family

MAGIC = b"CMSN"
FORMAT_VERSION = 1
_HEADER = struct.Struct("<4sHQQQQ")


@dataclass
class Sketch:
    """An ``N x J`` table of unsigned 64-bit counters plus the stream length.

    Build with :func:`new_sketch`. ``counts[n, j]`` is the number of ingested
    tokens that row ``n`` hashed into bucket ``j``.
    """

    family: HashFamily
    counts: np.ndarray
    total: int = 0

    @property
    def depth(self):
        return self.family.depth

    @property
    def width(self):
        return self.family.width

    @property
    def seed(self):
        return self.family.seed

    def update(self, token, count=1):
        """Add ``count`` occurrences of ``token``."""
        self.add_counts({token: count})

    def add_counts(self, token_counts):
        """Add a mapping ``token -> occurrences`` in one pass.

        Hashing happens once per distinct token, so this is the fast path for
        bulk ingestion. Raises ``OverflowError`` rather than wrapping.
        """
        items = [(t, int(c)) for t, c in token_counts.items() if int(c) != 0]
        if not items:
            return
        if any(c < 0 for _, c in items):
            raise ValueError("counts must be non-negative")
        added = sum(c for _, c in items)
        if self.total + added > MASK64:
            raise OverflowError("sketch total would exceed 2**64 - 1")
        fps = [fingerprint(t) for t, _ in items]
        idx = self.family.bucket_matrix(fps)
        weights = np.array([c for _, c in items], dtype=np.uint64)
        # Per-bucket sums of one call are bounded by ``added``, which was checked above;
        # the remaining risk is the existing counter plus that sum.
        for n in range(self.depth):
            inc = np.zeros(self.width, dtype=np.uint64)
            np.add.at(inc, idx[n], weights)
            headroom = np.uint64(MASK64) - self.counts[n]
            if np.any(inc > headroom):
                raise OverflowError("counter overflow")
            self.counts[n] += inc
        self.total += added

    def ingest(self, tokens):
        """Consume an iterable of tokens; returns the number ingested."""
        counter = Counter(tokens)
        self.add_counts(counter)
        return sum(counter.values())

    def bucket_vector(self, token):
        """Counter values ``c_{n, h_n(token)}`` for every row, as a Python list."""
        cols = self.family.buckets(fingerprint(token))
        return [int(self.counts[n, j]) for n, j in enumerate(cols)]

    def bucket_vectors(self, tokens):
        """``(len(tokens), N)`` array of bucket vectors."""
        fps = [fingerprint(t) for t in tokens]
        idx = self.family.bucket_matrix(fps)
        rows = np.arange(self.depth)[:, None]
        return self.counts[rows, idx].T.astype(np.int64)

    def rows(self):
        """Counters as a signed ``int64`` array (counts stay far below 2**63)."""
        return self.counts.astype(np.int64)

    def __eq__(self, other):
        if not isinstance(other, Sketch):
            return NotImplemented
        return (
            self.family == other.family
            and self.total == other.total
            and np.array_equal(self.counts, other.counts)
        )


def new_sketch(seed, depth, width):
    """Empty sketch whose hash family is derived from ``seed``."""
    family = make_hash_family(seed, depth, width)
    return Sketch(family, np.zeros((family.depth, family.width), dtype=np.uint64), 0)


def estimate_cms(bv):
    """Classical count-min estimate: the smallest counter."""
    if len(bv) == 0:
        raise ValueError("empty bucket vector")
    return int(min(bv))


def estimate_cmm(bv, m, width):
    """Count-mean-min estimate.

    Each row's counter is corrected by the average load of the other
    ``width - 1`` buckets, clamped at zero; the median across rows (mean of
    the middle two for an even row count) is capped by the count-min value.
    With a single bucket per row there is nothing to subtract, so the
    count-min estimate is returned.
    """
    if len(bv) == 0:
        raise ValueError("empty bucket vector")
    c = np.asarray(bv, dtype=float)
    cms = float(c.min())
    if width <= 1:
        return cms
    corrected = np.maximum(0.0, c - (float(m) - c) / (width - 1))
    return float(min(np.median(corrected), cms))


def merge(a, b):
    """Counter-wise sum of two sketches built with the same hash family."""
    if a.family != b.family:
        raise ValueError("cannot merge sketches with different (seed, depth, width)")
    if a.total + b.total > MASK64:
        raise OverflowError("merged total exceeds 2**64 - 1")
    headroom = np.uint64(MASK64) - a.counts
    if np.any(b.counts > headroom):
        raise OverflowError("counter overflow during merge")
    return Sketch(a.family, a.counts + b.counts, a.total + b.total)


def serialize(sketch):
    """Encode as bytes: header then counters, all little-endian."""
    header = _HEADER.pack(MAGIC, FORMAT_VERSION, sketch.seed, sketch.depth, sketch.width, sketch.total)
    return header + sketch.counts.astype("<u8", copy=False).tobytes(order="C")


def deserialize(data):
    """Inverse of :func:`serialize`; raises :class:`SketchFormatError` on bad input."""
    data = bytes(data)
    if len(data) < _HEADER.size:
        raise SketchFormatError(f"truncated header: {len(data)} bytes, need {_HEADER.size}")
    magic, version, seed, depth, width, total = _HEADER.unpack_from(data)
    if magic != MAGIC:
        raise SketchFormatError(f"bad magic {magic!r}, expected {MAGIC!r}")
    if version != FORMAT_VERSION:
        raise SketchFormatError(f"unsupported format version {version}")
    if depth < 1 or width < 1:
        raise SketchFormatError("depth and width must be at least 1")
    expected = _HEADER.size + 8 * depth * width
    if len(data) != expected:
        raise SketchFormatError(f"payload is {len(data)} bytes, expected {expected}")
    counts = np.frombuffer(data, dtype="<u8", offset=_HEADER.size).reshape(depth, width)
    counts = counts.astype(np.uint64)
    sums = counts.sum(axis=1, dtype=np.uint64)
    if np.any(sums != np.uint64(total)):
        raise SketchFormatError("row sums disagree with the stored total")
    return Sketch(make_hash_family(seed, depth, width), counts, int(total))


def save(sketch, path):
    with open(path, "wb") as fh:
        fh.write(serialize(sketch))


def load(path):
    with open(path, "rb") as fh:
        return deserialize(fh.read())
