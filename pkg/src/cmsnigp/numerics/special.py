"""Log-scale special functions.

Everything here returns natural logarithms so that the posterior and
likelihood code can stay in log-space end to end.
"""

from __future__ import annotations

import math
import threading

import numpy as np
from scipy import special

_LOG_PI = math.log(math.pi)

_lf_lock = threading.Lock()
_lf_table = np.zeros(1)


def log_gamma(x):
    """Natural log of the gamma function for positive arguments.

    Accepts scalars or arrays. Raises ``ValueError`` for ``x <= 0``.
    """
    arr = np.asarray(x, dtype=float)
    if np.any(~(arr > 0)):
        raise ValueError("log_gamma requires x > 0")
    out = special.gammaln(arr)
    return float(out) if out.ndim == 0 else out


def log_rising_factorial(a, n):
    """ln of the ascending factorial ``a (a+1) ... (a+n-1)``; zero for n = 0."""
    a_arr = np.asarray(a, dtype=float)
    n_arr = np.asarray(n)
    if np.any(~(a_arr > 0)):
        raise ValueError("log_rising_factorial requires a > 0")
    if np.any(n_arr < 0):
        raise ValueError("order n must be non-negative")
    out = special.gammaln(a_arr + n_arr) - special.gammaln(a_arr)
    out = np.where(n_arr == 0, 0.0, out)
    return float(out) if out.ndim == 0 else out


def log_factorials(upto):
    """Return a cached array ``t`` with ``t[i] = ln(i!)`` for ``i <= upto``."""
    global _lf_table
    table = _lf_table
    if table.shape[0] > upto:
        return table
    with _lf_lock:
        if _lf_table.shape[0] <= upto:
            size = max(int(upto) + 1, 2 * _lf_table.shape[0])
            _lf_table = special.gammaln(np.arange(size, dtype=float) + 1.0)
        return _lf_table


def log_sum_exp(values, axis=None):
    """Stable ``ln(sum(exp(values)))``.

    An all ``-inf`` input gives ``-inf``; an empty input is an error.
    """
    v = np.asarray(values, dtype=float)
    if v.size == 0:
        raise ValueError("log_sum_exp of an empty sequence")
    vmax = np.max(v, axis=axis, keepdims=True)
    shift = np.where(np.isfinite(vmax), vmax, 0.0)
    with np.errstate(divide="ignore"):
        out = np.log(np.sum(np.exp(v - shift), axis=axis, keepdims=True)) + shift
    out = np.where(np.isneginf(vmax), -np.inf, out)
    if axis is None:
        return float(out.reshape(()))
    return np.squeeze(out, axis=axis)


def _check_positive(z):
    z = np.asarray(z, dtype=float)
    if np.any(~(z > 0)):
        raise ValueError("Bessel argument must be positive")
    return z


def log_bessel_k_int(nu, z):
    """ln K_nu(z) for integer order nu (the order sign is irrelevant).

    Uses the exponentially scaled Bessel routine so large arguments do not
    underflow. When the scaled value overflows (large order, tiny argument),
    falls back to upward recurrence from orders 0 and 1 in log-space.
    """
    z = _check_positive(z)
    order = abs(int(nu))
    with np.errstate(over="ignore", divide="ignore"):
        scaled = special.kve(order, z)
        out = np.log(scaled) - z
    bad = ~np.isfinite(out)
    if np.any(bad):
        out = np.where(bad, _log_bessel_k_int_recurrence(order, np.where(bad, z, 1.0)), out)
    return float(out) if out.ndim == 0 else out


def _log_bessel_k_int_recurrence(order, z):
    # K_{v+1} = K_{v-1} + (2v/z) K_v, carried as log K_v and the ratio K_{v+1}/K_v.
    log_k = np.log(special.k0e(z)) - z
    ratio = special.k1e(z) / special.k0e(z)
    for v in range(order):
        log_k = log_k + np.log(ratio)
        ratio = 1.0 / ratio + 2.0 * (v + 1) / z
    return log_k


def log_bessel_k_half(c, z):
    """ln K_{c-1/2}(z) for integer c >= 0 via the terminating series.

    For order n + 1/2 (n >= 0)::

        K_{n+1/2}(z) = sqrt(pi / (2 z)) e^{-z} sum_{j=0}^{n} (n+j)! / (j! (n-j)!) (2z)^{-j}

    ``c = 0`` is order -1/2, identical to order 1/2. The sum is formed in
    log-space; its terms are log-concave in ``j`` so only a window around the
    largest term is summed once ``n`` is large, with the window grown until
    the edge terms are below ``e^-36`` of the peak.

    ``c`` and ``z`` broadcast against each other.
    """
    z = _check_positive(z)
    c_arr = np.asarray(c)
    if np.any(c_arr < 0):
        raise ValueError("c must be a non-negative integer")
    c_b, z_b = np.broadcast_arrays(c_arr.astype(np.int64), z)
    shape = z_b.shape
    n = np.where(c_b == 0, 0, c_b - 1).ravel()
    zz = z_b.ravel()
    lead = 0.5 * (_LOG_PI - np.log(2.0 * zz)) - zz
    out = lead + _log_half_series(n, zz)
    out = out.reshape(shape)
    return float(out) if out.ndim == 0 else out


def _log_half_series(n, z, chunk=4_000_000):
    """ln of the finite sum for each pair ``(n[i], z[i])``.

    Terms ``T(j)`` are log-concave in ``j`` with a peak ``j*`` and local width
    ``sd = 1/sqrt(kappa)``. Only the window ``j* +- 8.5 sd`` matters (edge terms
    are re-checked to lie ``e^36`` below the peak; the window grows if not).
    When the window is wide and clear of both ends of ``0..n``, the terms
    are samples of a smooth bell-shaped function, so summing every ``k``-th
    term and multiplying by ``k`` reproduces the full sum up to a relative
    error of order ``exp(-2 pi^2 sd^2 / k^2)``; ``k <= sd / 2`` keeps that
    below ``e^-78``. Windows touching either end use every term.
    """
    nmax = int(n.max()) if n.size else 0
    lf = log_factorials(2 * nmax + 2)
    log2z = np.log(2.0 * z)
    # Largest term: (n+j+1)(n-j) = 2z(j+1)  <=>  j^2 + (2z+1) j + 2z - n(n+1) = 0.
    bq = 2.0 * z + 1.0
    disc = bq * bq - 4.0 * (2.0 * z - n * (n + 1.0))
    jstar = 0.5 * (-bq + np.sqrt(np.maximum(disc, 0.0)))
    jstar = np.clip(np.rint(jstar), 0, n).astype(np.int64)
    curv = 1.0 / (jstar + 1.0) + 1.0 / (n - jstar + 1.0) - 1.0 / (n + jstar + 1.0)
    sd = 1.0 / np.sqrt(curv)
    half = np.ceil(8.5 * sd).astype(np.int64) + 4

    result = np.empty(n.shape[0])
    todo = np.arange(n.shape[0])
    while todo.size:
        lo = jstar[todo] - half[todo]
        hi = jstar[todo] + half[todo]
        interior = (lo > 0) & (hi < n[todo])
        stride = np.where(interior, np.maximum(1, np.floor(sd[todo] / 2.0)), 1).astype(np.int64)
        stride = 2 ** np.floor(np.log2(stride)).astype(np.int64)
        start_all = np.maximum(lo, 0)
        stop_all = np.minimum(hi, n[todo])
        count_all = (stop_all - start_all) // stride + 1
        retry = []
        width_class = np.ceil(np.log2(count_all)).astype(np.int64)
        blocks = []
        for wc in np.unique(width_class):
            members = np.flatnonzero(width_class == wc)
            step = max(1, chunk // int(2 ** wc))
            blocks.extend(members[a:a + step] for a in range(0, members.size, step))
        for sel in blocks:
            width = int(count_all[sel].max())
            idx = todo[sel]
            nn = n[idx]
            k = stride[sel]
            start = start_all[sel]
            stop = stop_all[sel]
            j = start[:, None] + k[:, None] * np.arange(width)[None, :]
            valid = j <= stop[:, None]
            jc = np.where(valid, j, 0)
            terms = lf[nn[:, None] + jc] - lf[jc] - lf[nn[:, None] - jc] - jc * log2z[idx, None]
            terms = np.where(valid, terms, -np.inf)
            peak = terms.max(axis=1)
            total = peak + np.log(np.exp(terms - peak[:, None]).sum(axis=1)) + np.log(k)
            result[idx] = total
            last = (stop - start) // k
            lo_term = terms[:, 0]
            hi_term = terms[np.arange(idx.size), last]
            weak = ((start > 0) & (lo_term > peak - 36.0)) | ((stop < nn) & (hi_term > peak - 36.0))
            if np.any(weak):
                retry.append(idx[weak])
        todo = np.concatenate(retry) if retry else np.empty(0, dtype=np.int64)
        if todo.size:
            half[todo] *= 2
    return result
