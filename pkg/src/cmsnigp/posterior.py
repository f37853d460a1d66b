"""Posterior distribution of a token's frequency given its hashed counts.

The prior on the data-generating distribution is the normalized inverse
Gaussian process (the normalized generalized Gamma process with
``sigma = 1/2``). Restricted to one hash bucket it stays in the same family
with mass ``alpha / J``, so the posterior of ``f_v`` given a single counter
``c`` is the marginal frequency law ``p(l; c, alpha / J)``:

* ``l = c``::

      p = 2^c alpha (1/2)_(c) / c!  *  ∫_0^inf x^c (1+2x)^(-c-1/2) exp(-alpha(sqrt(1+2x) - 1)) dx

* ``l < c``::

      p = binom(c, l) e^alpha alpha / pi  *  ∫_0^1 K_1(alpha / sqrt(x)) x^(c-l-1) (1-x)^(l-1/2) dx

With several rows the per-row laws multiply (hash rows are independent) and
the product is renormalized on ``0..min_n c_n``.

Two independent checks live here as well: a Monte Carlo estimator based on
Beta and inverse-gamma draws and an exact sum over integer partitions that
goes through the partition weights ``V_{m,k}``. A Dirichlet-process posterior
with a closed form serves as the baseline estimator.
"""

from __future__ import annotations

import math
import threading
from dataclasses import dataclass, field

import numpy as np
from scipy import special

from cmsnigp.numerics.combinatorics import gen_factorial_table
from cmsnigp.numerics.quadrature import integrate_log_batch, locate_peaks_batch, scan_peaks_batch
from cmsnigp.numerics.special import log_factorials, log_rising_factorial, log_sum_exp

SIGMA_NIGP = 0.5
_LOG_PI = math.log(math.pi)
MAX_ENUMERATION_M = 10


# --------------------------------------------------------------------------
# Data types


@dataclass(frozen=True)
class NigpModel:
    """Calibrated prior: mass ``alpha`` shared over ``width`` buckets."""

    alpha: float
    width: int
    sigma: float = SIGMA_NIGP

    def __post_init__(self):
        if not (self.alpha > 0 and math.isfinite(self.alpha)):
            raise ValueError("alpha must be positive and finite")
        if self.width < 1:
            raise ValueError("width must be at least 1")
        if self.sigma != SIGMA_NIGP:
            raise ValueError("the NIGP model is only defined at sigma = 1/2")

    @property
    def bucket_alpha(self):
        """Mass parameter of the prior restricted to one bucket."""
        return self.alpha / self.width


@dataclass(frozen=True)
class PosteriorPmf:
    """Normalized pmf over ``0..L`` stored as natural logs."""

    log_probs: np.ndarray

    @classmethod
    def from_unnormalized(cls, log_weights):
        w = np.asarray(log_weights, dtype=float)
        if w.ndim != 1 or w.size == 0:
            raise ValueError("need a non-empty 1-D array of log weights")
        total = log_sum_exp(w)
        if not math.isfinite(total):
            raise ArithmeticError("posterior weights are all zero or non-finite")
        lp = np.minimum(w - total, 0.0)
        return cls(lp)

    @classmethod
    def point_mass(cls, at):
        lp = np.full(int(at) + 1, -np.inf)
        lp[-1] = 0.0
        return cls(lp)

    @property
    def support_bound(self):
        return self.log_probs.shape[0] - 1

    @property
    def probs(self):
        return np.exp(self.log_probs)

    def mean(self):
        return posterior_mean(self)

    def median(self):
        return posterior_median(self)

    def mode(self):
        return posterior_mode(self)

    def credible_interval(self, level=0.95):
        return credible_interval(self, level)


def posterior_mean(pmf):
    p = pmf.probs
    return float(np.dot(np.arange(p.shape[0], dtype=float), p))


def _quantile(pmf, q):
    cdf = np.cumsum(pmf.probs)
    idx = int(np.searchsorted(cdf, q, side="left"))
    return min(idx, pmf.support_bound)


def posterior_median(pmf):
    """Smallest ``l`` whose cumulative probability reaches 1/2."""
    return _quantile(pmf, 0.5)


def posterior_mode(pmf):
    """Most probable ``l``; ties go to the smallest."""
    return int(np.argmax(pmf.log_probs))


def credible_interval(pmf, level=0.95):
    """Equal-tailed interval ``(lo, hi)`` holding at least ``level`` mass."""
    if not 0.0 < level < 1.0:
        raise ValueError("level must lie in (0, 1)")
    tail = 0.5 * (1.0 - level)
    return _quantile(pmf, tail), _quantile(pmf, 1.0 - tail)


# --------------------------------------------------------------------------
# Partition weights V_{m,k}


def _v_integrand(m, k, alpha, sigma):
    """Log integrand of V_{m,k} on the half line, vectorized over parameter rows."""
    half_alpha = 0.5 * alpha

    def f(x, xc, rows):
        mm = m[rows][:, None]
        kk = k[rows][:, None]
        lx = np.log(x)
        l2 = np.log1p(2.0 * x)
        # (1/2 + x)^{k sigma - m} = 2^{m - k sigma} (1 + 2x)^{k sigma - m};
        # the bracket [(1/2 + x)^sigma - 2^-sigma] times alpha 2^{sigma-1} / sigma is
        # (alpha / 2) expm1(sigma ln(1 + 2x)) / sigma.
        return ((mm - 1.0) * lx + (kk * sigma - mm) * l2
                + (mm - kk * sigma) * math.log(2.0)
                - half_alpha * np.expm1(sigma * l2) / sigma)

    return f


def log_v_many(ms, ks, alpha, sigma):
    """``ln V_{m,k}`` for paired arrays ``ms`` and ``ks`` (no caching)."""
    ms = np.atleast_1d(np.asarray(ms, dtype=float))
    ks = np.atleast_1d(np.asarray(ks, dtype=float))
    if ms.shape != ks.shape:
        raise ValueError("ms and ks must have the same shape")
    if not 0.0 < sigma < 1.0:
        raise ValueError("sigma must lie in (0, 1)")
    if not alpha > 0:
        raise ValueError("alpha must be positive")
    if np.any(ms < 1) or np.any(ks < 1) or np.any(ks > ms + 1):
        raise ValueError("need 1 <= k <= m + 1 and m >= 1")
    f = _v_integrand(ms, ks, float(alpha), float(sigma))
    s0 = scan_peaks_batch(f, "half", ms.size)
    centers, scales = locate_peaks_batch(f, "half", s0)
    log_int = integrate_log_batch(f, "half", centers, scales)
    pref = ks * math.log(alpha * 2.0 ** (sigma - 1.0)) - special.gammaln(ms)
    return pref + log_int


def log_V(m, k, alpha, sigma):
    """``ln V_{m,k}``: the one-dimensional integral defining the partition weights."""
    return float(log_v_many([m], [k], alpha, sigma)[0])


class VTable:
    """Memoized ``ln V_{m,k}`` for one ``(alpha, sigma)`` pair; thread-safe."""

    def __init__(self, alpha, sigma):
        if not alpha > 0:
            raise ValueError("alpha must be positive")
        if not 0.0 < sigma < 1.0:
            raise ValueError("sigma must lie in (0, 1)")
        self.alpha = float(alpha)
        self.sigma = float(sigma)
        self._cache = {}
        self._lock = threading.Lock()

    def __len__(self):
        return len(self._cache)

    def get(self, m, k):
        return self.get_many([(m, k)])[0]

    def get_many(self, pairs):
        """Values for a list of ``(m, k)`` pairs, computing missing ones in one batch."""
        pairs = [(int(m), int(k)) for m, k in pairs]
        with self._lock:
            missing = sorted({p for p in pairs if p not in self._cache})
        if missing:
            ms, ks = zip(*missing)
            vals = log_v_many(ms, ks, self.alpha, self.sigma)
            with self._lock:
                self._cache.update(zip(missing, (float(v) for v in vals)))
        return [self._cache[p] for p in pairs]


# --------------------------------------------------------------------------
# NIGP marginal frequency law


def _log_k1(z):
    return np.log(special.k1e(z)) - z


def _lower_branch(m, ells, alpha):
    """``ln p(l; m, alpha)`` for ``l < m``, vectorized over ``ells`` (and ``m``)."""
    ells = np.asarray(ells, dtype=float)
    ms = np.broadcast_to(np.asarray(m, dtype=float), ells.shape).astype(float)
    a = ms - ells
    b = ells + 0.5

    def f(x, xc, rows):
        aa = a[rows][:, None]
        bb = b[rows][:, None]
        return _log_k1(alpha / np.sqrt(x)) + (aa - 1.0) * np.log(x) + (bb - 1.0) * np.log(xc)

    centers, scales = locate_peaks_batch(f, "unit", np.log(a / b))
    log_int = integrate_log_batch(f, "unit", centers, scales)
    lf = log_factorials(int(ms.max()) + 1)
    mi = ms.astype(np.int64)
    li = ells.astype(np.int64)
    log_binom = lf[mi] - lf[li] - lf[mi - li]
    return log_binom + alpha + math.log(alpha) - _LOG_PI + log_int


def _top_branch(ms, alpha):
    """``ln p(m; m, alpha)`` vectorized over ``ms``."""
    ms = np.atleast_1d(np.asarray(ms, dtype=float))

    def f(x, xc, rows):
        mm = ms[rows][:, None]
        root = np.sqrt(1.0 + 2.0 * x)
        return mm * np.log(x) - (mm + 0.5) * np.log1p(2.0 * x) - alpha * 2.0 * x / (root + 1.0)

    out = np.zeros(ms.shape)
    pos = ms > 0
    if np.any(pos):
        sub = ms[pos]

        def g(x, xc, rows):
            return f(x, xc, np.flatnonzero(pos)[rows])

        s0 = scan_peaks_batch(g, "half", sub.size)
        centers, scales = locate_peaks_batch(g, "half", s0)
        log_int = integrate_log_batch(g, "half", centers, scales)
        pref = (sub * math.log(2.0) + math.log(alpha)
                + log_rising_factorial(0.5, sub) - special.gammaln(sub + 1.0))
        out[pos] = pref + log_int
    return out


def nigp_log_pmf_vector(m, alpha, ells=None):
    """``ln p(l; m, alpha)`` for every ``l`` in ``ells`` (default ``0..m``)."""
    m = int(m)
    alpha = float(alpha)
    if m < 0:
        raise ValueError("m must be non-negative")
    if not alpha > 0:
        raise ValueError("alpha must be positive")
    ells = np.arange(m + 1) if ells is None else np.atleast_1d(np.asarray(ells, dtype=np.int64))
    if np.any(ells < 0) or np.any(ells > m):
        raise ValueError("need 0 <= l <= m")
    out = np.empty(ells.shape)
    top = ells == m
    if np.any(top):
        out[top] = _top_branch([m], alpha)[0]
    if np.any(~top):
        out[~top] = _lower_branch(m, ells[~top], alpha)
    return out


def nigp_log_pmf(ell, m, alpha):
    """``ln p(l; m, alpha)``: log-probability that a fresh draw has frequency ``l``."""
    if ell > m:
        raise ValueError("ell cannot exceed m")
    if m == 0:
        return 0.0
    return float(nigp_log_pmf_vector(m, alpha, [ell])[0])


# --------------------------------------------------------------------------
# Oracles


def mc_nigp_pmf(ell, m, alpha, n_samples, seed):
    """Monte Carlo estimate of ``p(l; m, alpha)`` with its standard error.

    For ``l = m`` the estimator averages ``exp(alpha - alpha^2 X / Y)`` with
    ``Y ~ Beta(1/2, m + 1/2)`` and ``X`` from the order-1/2 polynomially tilted
    inverse Gaussian law, whose density ``x^-2 e^{-1/(4x)} / 4`` is that of
    ``1 / (4 E)`` with ``E`` standard exponential. For ``l < m`` it averages
    ``K_1(alpha / sqrt(Y))`` with ``Y ~ Beta(m - l, l + 1/2)``.
    """
    n_samples = int(n_samples)
    if n_samples < 10_000:
        raise ValueError("n_samples must be at least 10^4")
    if not 0 <= ell <= m:
        raise ValueError("need 0 <= ell <= m")
    if not alpha > 0:
        raise ValueError("alpha must be positive")
    rng = np.random.default_rng(seed)
    if ell == m:
        y = rng.beta(0.5, m + 0.5, size=n_samples)
        x = 1.0 / (4.0 * rng.standard_exponential(n_samples))
        log_pref = float(log_rising_factorial(0.5, m) - special.gammaln(m + 1.0))
        vals = np.exp(alpha - alpha * alpha * x / y + log_pref)
    else:
        y = rng.beta(m - ell, ell + 0.5, size=n_samples)
        log_pref = (special.gammaln(m + 1.0) - special.gammaln(ell + 1.0) - special.gammaln(m - ell + 1.0)
                    + special.gammaln(ell + 0.5) - 0.5 * _LOG_PI
                    + special.gammaln(m - ell) - 0.5 * _LOG_PI - special.gammaln(m + 0.5)
                    + alpha + math.log(alpha))
        vals = np.exp(log_pref + _log_k1(alpha / np.sqrt(y)))
    est = float(vals.mean())
    se = float(vals.std(ddof=1) / math.sqrt(n_samples))
    return est, se


def integer_partitions(m):
    """Yield multiplicity vectors ``counts`` (``counts[r]`` parts of size ``r``) of ``m``."""

    def parts(n, largest):
        if n == 0:
            yield []
            return
        for p in range(min(n, largest), 0, -1):
            for rest in parts(n - p, p):
                yield [p] + rest

    for blocks in parts(m, m):
        counts = [0] * (m + 1)
        for p in blocks:
            counts[p] += 1
        yield counts


def exact_pmf_enumeration(ell, m, alpha, sigma, vtable=None):
    """``p(l; m, alpha, sigma)`` by summing over all partitions of ``m``.

    Each multiplicity vector gets the partition-law probability
    ``V_{m,k} m! prod_r ((1-sigma)_(r-1) / r!)^{m_r} / m_r!`` and contributes
    its predictive probability of a frequency-``l`` draw.
    """
    m = int(m)
    ell = int(ell)
    if m > MAX_ENUMERATION_M:
        raise ValueError(f"enumeration is limited to m <= {MAX_ENUMERATION_M}")
    if not 0 <= ell <= m:
        raise ValueError("need 0 <= ell <= m")
    if m == 0:
        return 1.0
    vt = vtable if vtable is not None else VTable(alpha, sigma)
    lf = log_factorials(m + 1)
    total = 0.0
    for counts in integer_partitions(m):
        k = sum(counts)
        if ell >= 1 and counts[ell] == 0:
            continue
        lv_mk, lv_next_k, lv_next_k1 = vt.get_many([(m, k), (m + 1, k), (m + 1, k + 1)])
        log_p = lv_mk + lf[m]
        for r in range(1, m + 1):
            mr = counts[r]
            if mr:
                log_p += mr * (float(log_rising_factorial(1.0 - sigma, r - 1)) - lf[r]) - lf[mr]
        if ell == 0:
            log_pred = lv_next_k1 - lv_mk
        else:
            log_pred = lv_next_k - lv_mk + math.log((ell - sigma) * counts[ell])
        total += math.exp(log_p + log_pred)
    return total


def k_distribution(m, alpha, sigma, vtable=None):
    """``Pr[K_m = k]`` for ``k = 1..m`` from the generalized factorial coefficients."""
    vt = vtable if vtable is not None else VTable(alpha, sigma)
    table = gen_factorial_table(sigma, m)
    logs = vt.get_many([(m, k) for k in range(1, m + 1)])
    return np.array([math.exp(lv - k * math.log(sigma) + table.log_coef(m, k))
                     for k, lv in zip(range(1, m + 1), logs)])


# --------------------------------------------------------------------------
# Dirichlet-process baseline


def dp_bucket_log_pmf(c, beta, upto=None):
    """``ln p_DP(l; c, beta)`` for ``l = 0..upto`` (default ``c``).

    Closed form of the frequency law under a Dirichlet process with mass
    ``beta``: ``beta c! / (c - l)! * Gamma(beta + c - l) / Gamma(beta + c + 1)``.
    """
    c = int(c)
    beta = float(beta)
    if c < 0:
        raise ValueError("c must be non-negative")
    if not beta > 0:
        raise ValueError("beta must be positive")
    upto = c if upto is None else min(int(upto), c)
    ell = np.arange(upto + 1)
    lf = log_factorials(c + 1)
    return (math.log(beta) + lf[c] - lf[c - ell]
            + special.gammaln(beta + c - ell) - special.gammaln(beta + c + 1.0))


def dp_bucket_posterior(c, beta):
    return PosteriorPmf.from_unnormalized(dp_bucket_log_pmf(c, beta))


# --------------------------------------------------------------------------
# Bucket and sketch posteriors


def nigp_bucket_log_pmf(c, bucket_alpha, upto=None):
    """``ln p(l; c, bucket_alpha)`` for ``l = 0..upto`` (default ``c``)."""
    c = int(c)
    upto = c if upto is None else min(int(upto), c)
    if c == 0:
        return np.zeros(1)
    return nigp_log_pmf_vector(c, bucket_alpha, np.arange(upto + 1))


def nigp_bucket_posterior(c, model):
    """Posterior of ``f_v`` given one counter ``c`` (renormalized on ``0..c``)."""
    return PosteriorPmf.from_unnormalized(nigp_bucket_log_pmf(c, model.bucket_alpha))


@dataclass
class BucketPmfCache:
    """Per-counter-value log-pmfs shared by every query against one sketch.

    ``kind`` is ``"nigp"`` or ``"dp"``; ``bucket_alpha`` is the restricted
    mass. Arrays are extended lazily when a larger prefix is requested, and
    :meth:`prefetch` computes many counters in a single vectorized pass.
    """

    kind: str
    bucket_alpha: float
    _store: dict = field(default_factory=dict, repr=False)
    _lock: threading.Lock = field(default_factory=threading.Lock, repr=False)

    def __post_init__(self):
        if self.kind not in ("nigp", "dp"):
            raise ValueError("kind must be 'nigp' or 'dp'")

    def prefetch(self, needs):
        """``needs`` maps counter value ``c`` to the largest ``l`` required."""
        todo = {}
        with self._lock:
            for c, upto in needs.items():
                c = int(c)
                upto = min(int(upto), c)
                have = self._store.get(c)
                if have is None or have.shape[0] <= upto:
                    todo[c] = upto
        if not todo:
            return
        if self.kind == "dp":
            fresh = {c: dp_bucket_log_pmf(c, self.bucket_alpha, upto) for c, upto in todo.items()}
        else:
            fresh = self._nigp_batch(todo)
        with self._lock:
            for c, arr in fresh.items():
                have = self._store.get(c)
                if have is None or have.shape[0] < arr.shape[0]:
                    self._store[c] = arr

    def _nigp_batch(self, todo):
        a = self.bucket_alpha
        cs = np.array(sorted(todo), dtype=np.int64)
        uptos = np.array([todo[c] for c in cs], dtype=np.int64)
        out = {int(c): np.empty(u + 1) for c, u in zip(cs, uptos)}
        for c in cs:
            if c == 0:
                out[0][0] = 0.0
        # Lower branch rows: l = 0..min(upto, c-1) for each c >= 1.
        low_hi = np.minimum(uptos, cs - 1)
        sel = (cs >= 1) & (low_hi >= 0)
        if np.any(sel):
            lens = low_hi[sel] + 1
            m_rows = np.repeat(cs[sel], lens)
            starts = np.cumsum(lens) - lens
            l_rows = np.arange(lens.sum()) - np.repeat(starts, lens)
            vals = _lower_branch(m_rows, l_rows, a)
            for c, s, n in zip(cs[sel], starts, lens):
                out[int(c)][:n] = vals[s:s + n]
        top = (cs >= 1) & (uptos == cs)
        if np.any(top):
            vals = _top_branch(cs[top], a)
            for c, v in zip(cs[top], vals):
                out[int(c)][int(c)] = v
        return out

    def get(self, c, upto):
        c = int(c)
        upto = min(int(upto), c)
        arr = self._store.get(c)
        if arr is None or arr.shape[0] <= upto:
            self.prefetch({c: upto})
            arr = self._store[c]
        return arr[:upto + 1]


def _sketch_posterior(bv, cache):
    bv = [int(v) for v in bv]
    if not bv:
        raise ValueError("empty bucket vector")
    lo = min(bv)
    if lo == 0:
        return PosteriorPmf.point_mass(0)
    total = np.zeros(lo + 1)
    for c in bv:
        total = total + cache.get(c, lo)
    return PosteriorPmf.from_unnormalized(total)


def nigp_sketch_posterior(bv, model, cache=None):
    """Posterior of ``f_v`` given all of a token's counters, on ``0..min(bv)``."""
    if cache is None:
        cache = BucketPmfCache("nigp", model.bucket_alpha)
    return _sketch_posterior(bv, cache)


def dp_sketch_posterior(bv, alpha, width, cache=None):
    """Dirichlet-process counterpart of :func:`nigp_sketch_posterior`."""
    if cache is None:
        cache = BucketPmfCache("dp", alpha / width)
    return _sketch_posterior(bv, cache)
