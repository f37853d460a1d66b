"""Token sources and partition samplers.

* :func:`zipf_stream` draws i.i.d. ranks from an unbounded Zipf law.
* :func:`text_stream` reads plain text or UCI bag-of-words files.
* :func:`nggp_sample_partition` and :func:`dp_sample_partition` grow a
  random partition one token at a time (generalized Chinese restaurant).

All randomness comes from ``numpy.random.default_rng(seed)``, so a stream is
a deterministic function of its parameters.
"""

from __future__ import annotations

import math
import re
from collections import Counter
from dataclasses import dataclass, field

import numpy as np

from cmsnigp.errors import ConfigError, NumericalError, ParseError
from cmsnigp.posterior import VTable

STREAM_KINDS = ("zipf", "text_file", "bagofwords_file", "nggp", "dp")
TEXT_FORMATS = ("plain", "uci_bagofwords")
MAX_NGGP_M = 100_000
STEP_SUM_TOL = 1e-8
_BATCH = 65_536
_WORD = re.compile(r"[^\W_]+")


@dataclass(frozen=True)
class StreamSpec:
    """Description of a token source.

    ``s`` is the Zipf exponent, ``sigma``/``alpha`` the NGGP parameters and
    ``beta`` the DP mass. File-backed kinds read ``path`` and ignore ``m``
    and ``seed``.
    """

    kind: str
    m: int = 0
    seed: int = 0
    s: float | None = None
    sigma: float | None = None
    alpha: float | None = None
    beta: float | None = None
    path: str | None = None

    def __post_init__(self):
        if self.kind not in STREAM_KINDS:
            raise ConfigError(f"unknown stream kind {self.kind!r}; expected one of {STREAM_KINDS}")
        if self.kind in ("zipf", "nggp", "dp") and self.m < 1:
            raise ConfigError("stream length m must be at least 1")
        if self.kind == "zipf" and not (self.s is not None and self.s > 1):
            raise ConfigError("zipf streams need an exponent s > 1")
        if self.kind == "nggp":
            if not (self.sigma is not None and 0 < self.sigma < 1):
                raise ConfigError("nggp streams need sigma in (0, 1)")
            if not (self.alpha is not None and self.alpha > 0):
                raise ConfigError("nggp streams need alpha > 0")
        if self.kind == "dp" and not (self.beta is not None and self.beta > 0):
            raise ConfigError("dp streams need beta > 0")
        if self.kind in ("text_file", "bagofwords_file") and not self.path:
            raise ConfigError(f"{self.kind} streams need a path")


@dataclass
class ExactCounter:
    """Exact token frequencies, used as ground truth."""

    counts: Counter = field(default_factory=Counter)
    total: int = 0
    frozen: bool = False

    @property
    def distinct(self):
        return len(self.counts)

    def add(self, token, n=1):
        self.update({token: n})

    def update(self, token_counts):
        """Add a mapping ``token -> occurrences``."""
        if self.frozen:
            raise RuntimeError("counter is frozen")
        for token, n in token_counts.items():
            n = int(n)
            if n < 0:
                raise ValueError("counts must be non-negative")
            if n:
                self.counts[token] += n
                self.total += n

    def freeze(self):
        self.frozen = True
        return self

    def frequency(self, token):
        return self.counts.get(token, 0)


def exact_count(tokens):
    """Exact frequencies of an iterable of tokens."""
    counter = ExactCounter()
    counter.update(Counter(tokens))
    return counter


@dataclass(frozen=True)
class PartitionStats:
    """Number of blocks ``k`` and multiplicities of a partition of ``m`` items.

    ``multiplicities[r]`` is the number of blocks of size ``r`` (index 0 is
    unused and always 0).
    """

    m: int
    k: int
    multiplicities: np.ndarray

    @classmethod
    def from_block_sizes(cls, sizes):
        sizes = np.asarray(sizes, dtype=np.int64)
        if sizes.size and sizes.min() < 1:
            raise ValueError("block sizes must be positive")
        m = int(sizes.sum())
        mult = np.bincount(sizes, minlength=m + 1)
        stats = cls(m, int(sizes.size), mult)
        stats.check()
        return stats

    def check(self):
        r = np.arange(self.multiplicities.shape[0])
        if int(self.multiplicities.sum()) != self.k or int((r * self.multiplicities).sum()) != self.m:
            raise NumericalError("partition multiplicities are inconsistent with (m, k)")

    def proportion(self, r):
        """``M_r / K``."""
        if self.k == 0:
            return 0.0
        return float(self.multiplicities[r]) / self.k if r < self.multiplicities.shape[0] else 0.0


# --------------------------------------------------------------------------
# Zipf


def zipf_ranks(s, size, rng):
    """``size`` i.i.d. Zipf(s) ranks by Devroye's rejection method.

    Ranks are returned as floats: for ``s`` close to 1 the law is heavy
    enough that ranks beyond ``2**63`` occur. They are exact integers below
    ``2**53``; beyond that they carry float resolution.
    """
    if not s > 1:
        raise ValueError("the Zipf exponent must exceed 1")
    size = int(size)
    b = 2.0 ** (s - 1.0)
    out = np.empty(size)
    filled = 0
    while filled < size:
        n = max(64, int(1.3 * (size - filled)))
        u = 1.0 - rng.random(n)
        v = rng.random(n)
        with np.errstate(over="ignore"):
            x = np.floor(u ** (-1.0 / (s - 1.0)))
        t = (1.0 + 1.0 / x) ** (s - 1.0)
        ok = np.isfinite(x) & (v * x * (t - 1.0) / (b - 1.0) <= t / b)
        acc = x[ok][: size - filled]
        out[filled:filled + acc.size] = acc
        filled += acc.size
    return out


def _rank_token(r):
    return str(int(r))


def zipf_stream(s, m, seed):
    """Iterator over ``m`` Zipf(s) tokens (decimal rank strings)."""
    if not s > 1:
        raise ConfigError("the Zipf exponent must exceed 1")
    rng = np.random.default_rng(seed)
    left = int(m)
    while left > 0:
        n = min(left, _BATCH)
        for r in zipf_ranks(s, n, rng):
            yield _rank_token(r)
        left -= n


def zipf_counts(s, m, seed):
    """Exact token counts of :func:`zipf_stream` without materializing the tokens."""
    rng = np.random.default_rng(seed)
    counts = Counter()
    left = int(m)
    while left > 0:
        n = min(left, _BATCH)
        vals, cnt = np.unique(zipf_ranks(s, n, rng), return_counts=True)
        for v, c in zip(vals, cnt):
            counts[_rank_token(v)] += int(c)
        left -= n
    return counts


# --------------------------------------------------------------------------
# Files


def _plain_tokens(fh):
    for line in fh:
        yield from _WORD.findall(line.lower())


def text_stream(path, format="plain"):
    """Iterator over the tokens of a file.

    ``plain``: lowercased words, split on runs of non-alphanumeric
    characters. ``uci_bagofwords``: a ``D``, ``W``, ``NNZ`` header followed
    by ``docID wordID count`` triples; ``wordID`` is emitted ``count``
    times. Malformed input raises :class:`ParseError` carrying the line
    number.
    """
    if format not in TEXT_FORMATS:
        raise ConfigError(f"unknown text format {format!r}; expected one of {TEXT_FORMATS}")
    return _file_tokens(path, format)


def _file_tokens(path, format):
    with open(path, encoding="utf-8") as fh:
        if format == "plain":
            yield from _plain_tokens(fh)
        else:
            for word, count, _ in _uci_entries(fh):
                for _ in range(count):
                    yield word


def _uci_entries(fh):
    """Validated ``(wordID, count, line)`` triples; checks the NNZ header at the end."""
    nnz = None
    seen = 0
    lineno = 0
    header = []
    for raw in fh:
        lineno += 1
        text = raw.strip()
        if not text:
            continue
        if len(header) < 3:
            try:
                val = int(text)
            except ValueError:
                raise ParseError(f"expected an integer header value, got {text!r}", line=lineno) from None
            if val < 0:
                raise ParseError("header values must be non-negative", line=lineno)
            header.append(val)
            if len(header) == 3:
                nnz = header[2]
            continue
        parts = text.split()
        if len(parts) != 3:
            raise ParseError(f"expected 'docID wordID count', got {text!r}", line=lineno)
        try:
            doc, word, count = (int(p) for p in parts)
        except ValueError:
            raise ParseError(f"non-integer field in {text!r}", line=lineno) from None
        if not 1 <= doc <= header[0]:
            raise ParseError(f"docID {doc} outside 1..{header[0]}", line=lineno)
        if not 1 <= word <= header[1]:
            raise ParseError(f"wordID {word} outside 1..{header[1]}", line=lineno)
        if count < 1:
            raise ParseError(f"count must be positive, got {count}", line=lineno)
        seen += 1
        if seen > nnz:
            raise ParseError(f"more entries than the NNZ header value {nnz}", line=lineno)
        yield str(word), count, lineno
    if len(header) < 3:
        raise ParseError("missing header (expected D, W and NNZ lines)", line=lineno + 1)
    if seen != nnz:
        raise ParseError(f"found {seen} entries but the NNZ header says {nnz}", line=lineno + 1)


def text_counts(path, format="plain"):
    """Token counts of a file (same tokens as :func:`text_stream`)."""
    if format == "uci_bagofwords":
        counts = Counter()
        with open(path, encoding="utf-8") as fh:
            for word, count, _ in _uci_entries(fh):
                counts[word] += count
        return counts
    return Counter(text_stream(path, format))


# --------------------------------------------------------------------------
# Partition samplers


def _pick_existing(labels, sizes, n_tokens, sigma, rng):
    """Block of a size-biased past token, accepted with probability (n - sigma) / n."""
    while True:
        b = labels[int(rng.random() * n_tokens)]
        n = sizes[b]
        if sigma == 0.0 or rng.random() * n < n - sigma:
            return b


def nggp_sample_partitions(m, alpha, sigma, seeds, checkpoints=()):
    """Run the NGGP sequential sampler for several seeds in lockstep.

    With ``i`` tokens in ``k`` blocks, token ``i + 1`` opens a new block with
    probability ``V_{i+1,k+1} / V_{i,k}`` and joins block ``b`` of size
    ``n_b`` with probability ``(n_b - sigma) V_{i+1,k} / V_{i,k}``. The
    partition weights come from one shared :class:`VTable`, so all seeds
    need a single batch of integrals per step.

    Returns one ``(PartitionStats, block_sizes, k_at_checkpoints)`` per seed.
    Raises :class:`NumericalError` if a step's probabilities do not sum to
    one within ``1e-8``.
    """
    m = int(m)
    if not 0 < sigma < 1:
        raise ValueError("sigma must lie in (0, 1)")
    if not alpha > 0:
        raise ValueError("alpha must be positive")
    if not 1 <= m <= MAX_NGGP_M:
        raise ValueError(f"m must lie in 1..{MAX_NGGP_M}")
    checkpoints = sorted({int(c) for c in checkpoints})
    if checkpoints and not (1 <= checkpoints[0] and checkpoints[-1] <= m):
        raise ValueError("checkpoints must lie in 1..m")
    table = VTable(alpha, sigma)
    n = len(seeds)
    rngs = [np.random.default_rng(s) for s in seeds]
    labels = [np.empty(m, dtype=np.int64) for _ in range(n)]
    sizes = [[1] for _ in range(n)]
    for j in range(n):
        labels[j][0] = 0
    ks = [1] * n
    trace = [[] for _ in range(n)]
    cp = 0
    if checkpoints and checkpoints[0] == 1:
        for j in range(n):
            trace[j].append(1)
        cp = 1
    for i in range(1, m):
        pairs = []
        for k in ks:
            pairs += [(i, k), (i + 1, k + 1), (i + 1, k)]
        vals = table.get_many(pairs)
        for j in range(n):
            k = ks[j]
            v0, v_new, v_old = vals[3 * j:3 * j + 3]
            p_new = math.exp(v_new - v0)
            p_old = (i - k * sigma) * math.exp(v_old - v0)
            if abs(p_new + p_old - 1.0) > STEP_SUM_TOL:
                raise NumericalError(
                    f"step probabilities sum to {p_new + p_old!r} at m={i}, k={k}")
            rng = rngs[j]
            if rng.random() * (p_new + p_old) < p_new:
                labels[j][i] = k
                sizes[j].append(1)
                ks[j] = k + 1
            else:
                b = _pick_existing(labels[j], sizes[j], i, sigma, rng)
                labels[j][i] = b
                sizes[j][b] += 1
        if cp < len(checkpoints) and checkpoints[cp] == i + 1:
            for j in range(n):
                trace[j].append(ks[j])
            cp += 1
    out = []
    for j in range(n):
        sz = np.asarray(sizes[j], dtype=np.int64)
        out.append((PartitionStats.from_block_sizes(sz), sz, tuple(trace[j])))
    return out


def nggp_sample_partition(m, alpha, sigma, seed):
    """One NGGP partition of ``m`` tokens: ``(PartitionStats, block_sizes)``."""
    stats, sizes, _ = nggp_sample_partitions(m, alpha, sigma, [seed])[0]
    return stats, sizes


def crp_labels(m, beta, seed):
    """Block label of each of ``m`` tokens under the Chinese-restaurant rule with mass ``beta``.

    Labels are numbered in order of first appearance. Returns ``(labels, k)``.
    """
    if not beta > 0:
        raise ValueError("beta must be positive")
    rng = np.random.default_rng(seed)
    labels = np.empty(int(m), dtype=np.int64)
    if m == 0:
        return labels, 0
    i = np.arange(int(m))
    new = rng.random(int(m)) * (beta + i) < beta
    pick = rng.random(int(m))
    k = 0
    for t in range(int(m)):
        if new[t]:
            labels[t] = k
            k += 1
        else:
            labels[t] = labels[int(pick[t] * t)]
    return labels, k


def dp_sample_partition(m, beta, seed):
    """Chinese-restaurant partition of ``m`` tokens with mass ``beta``."""
    labels, k = crp_labels(m, float(beta), seed)
    sizes = np.bincount(labels, minlength=k).astype(np.int64)
    return PartitionStats.from_block_sizes(sizes), sizes


# --------------------------------------------------------------------------
# Dispatch


def stream_counts(spec):
    """Exact token counts for any :class:`StreamSpec`."""
    if spec.kind == "zipf":
        return zipf_counts(spec.s, spec.m, spec.seed)
    if spec.kind == "text_file":
        return text_counts(spec.path, "plain")
    if spec.kind == "bagofwords_file":
        return text_counts(spec.path, "uci_bagofwords")
    if spec.kind == "nggp":
        _, sizes = nggp_sample_partition(spec.m, spec.alpha, spec.sigma, spec.seed)
    else:
        _, sizes = dp_sample_partition(spec.m, spec.beta, spec.seed)
    return Counter({f"b{i}": int(c) for i, c in enumerate(sizes)})


def stream_tokens(spec):
    """Token iterator for any :class:`StreamSpec`."""
    if spec.kind == "zipf":
        return zipf_stream(spec.s, spec.m, spec.seed)
    if spec.kind == "text_file":
        return text_stream(spec.path, "plain")
    if spec.kind == "bagofwords_file":
        return text_stream(spec.path, "uci_bagofwords")
    if spec.kind == "dp":
        labels, _ = crp_labels(spec.m, float(spec.beta), spec.seed)
        return (f"b{b}" for b in labels)
    # The NGGP sampler returns block sizes; sketches and counters do not depend on
    # token order, so blocks are emitted one after another.
    counts = stream_counts(spec)
    return (tok for tok, c in counts.items() for _ in range(c))
