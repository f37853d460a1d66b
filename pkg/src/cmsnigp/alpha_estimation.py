"""Empirical-Bayes calibration of the prior mass from the sketch counters.

Under the NIGP prior each sketch row is a multinomial draw whose bucket
probabilities follow a normalized inverse Gaussian law with parameters
``(alpha/J, ..., alpha/J)``. Integrating those probabilities out gives, per
row with counts ``c_1..c_J`` summing to ``m``::

    ln L = ln m + (m + J/2) ln(alpha/J) + alpha - (J/2) ln(pi/2) - sum_j ln c_j!
           + ln ∫_0^inf y^(m-1) (1+2y)^(J/4 - m/2) prod_j K_{c_j - 1/2}((alpha/J) sqrt(1+2y)) dy

Rows are independent, so their log-likelihoods add. The maximizer over
``alpha`` is bracketed on a power-of-two grid and refined by golden-section
search. The Dirichlet-process baseline uses the Dirichlet-multinomial
likelihood with the same optimizer.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import special

from cmsnigp.errors import AlphaBoundaryError
from cmsnigp.numerics.quadrature import integrate_log_auto
from cmsnigp.numerics.special import log_bessel_k_half, log_factorials

GRID_EXPONENTS = tuple(range(-6, 25))
ALPHA_TOL = 1e-3
_INV_PHI = (math.sqrt(5.0) - 1.0) / 2.0
_LOG_HALF_PI = math.log(0.5 * math.pi)


@dataclass(frozen=True)
class AlphaEstimate:
    """Result of the likelihood maximization.

    ``bracket`` is the pair of grid neighbours around the best grid point;
    ``alpha_hat`` lies strictly inside it.
    """

    alpha_hat: float
    log_likelihood_at_hat: float
    bracket: tuple
    iterations: int
    tolerance_met: bool
    grid: tuple = ()


class LikelihoodCache:
    """Per-sketch precomputation for repeated likelihood evaluations.

    Each row is reduced once to its distinct counter values with their
    multiplicities, together with ``sum_j ln c_j!``; identical rows share
    one integral. During an evaluation the Bessel factor is computed once
    per distinct counter value and quadrature node.
    """

    def __init__(self, rows, m, width):
        rows = np.atleast_2d(np.asarray(rows, dtype=np.int64))
        if rows.shape[1] != width:
            raise ValueError(f"rows have {rows.shape[1]} columns, expected width {width}")
        if np.any(rows < 0):
            raise ValueError("counts must be non-negative")
        sums = rows.sum(axis=1)
        if np.any(sums != m):
            raise ValueError(f"every row must sum to m={m}; got {sorted(set(sums.tolist()))}")
        self.m = int(m)
        self.width = int(width)
        self.n_rows = rows.shape[0]
        lf = log_factorials(int(rows.max()) + 1)
        groups = {}
        for row in rows:
            key = tuple(np.sort(row).tolist())
            groups[key] = groups.get(key, 0) + 1
        self.groups = []
        for key, weight in groups.items():
            arr = np.asarray(key, dtype=np.int64)
            uc, cnt = np.unique(arr, return_counts=True)
            self.groups.append((weight, uc, cnt.astype(float), float(lf[arr].sum())))
        # Peak location (log y) of each group's integrand at the last alpha evaluated.
        # The peak moves smoothly with alpha, so it seeds the next search; the
        # integral itself does not depend on the seed.
        self.peaks = [None] * len(self.groups)


def _row_log_likelihood(m, width, alpha, uc, cnt, log_fact_sum, start=None, info=None):
    a = alpha / width
    expo = width / 4.0 - m / 2.0
    cc = uc[:, None]
    w = cnt[:, None]

    def f(y):
        z = a * np.sqrt(1.0 + 2.0 * y)
        bes = log_bessel_k_half(cc, z[None, :])
        return (m - 1.0) * np.log(y) + expo * np.log1p(2.0 * y) + (w * bes).sum(axis=0)

    log_int = integrate_log_auto(f, "half", start=start, info=info)
    const = (math.log(m) + (m + width / 2.0) * math.log(a) + alpha
             - (width / 2.0) * _LOG_HALF_PI - log_fact_sum)
    return const + log_int


def log_marginal_likelihood(rows, m, alpha, width, cache=None):
    """NIGP log-likelihood of the sketch rows at mass ``alpha``."""
    if not (alpha > 0 and math.isfinite(alpha)):
        raise ValueError("alpha must be positive and finite")
    m = int(m)
    if m < 1:
        raise ValueError("the likelihood needs at least one token")
    if cache is None:
        cache = LikelihoodCache(rows, m, width)
    total = 0.0
    for g, (weight, uc, cnt, lfs) in enumerate(cache.groups):
        info = {}
        total += weight * _row_log_likelihood(m, width, float(alpha), uc, cnt, lfs,
                                              start=cache.peaks[g], info=info)
        cache.peaks[g] = info.get("center")
    return total


def log_marginal_likelihood_uncached(rows, m, alpha, width):
    """Reference evaluation that treats every bucket separately (no sharing)."""
    rows = np.atleast_2d(np.asarray(rows, dtype=np.int64))
    if np.any(rows.sum(axis=1) != m):
        raise ValueError("every row must sum to m")
    lf = log_factorials(int(rows.max()) + 1)
    total = 0.0
    for row in rows:
        total += _row_log_likelihood(int(m), int(width), float(alpha), row, np.ones(row.shape[0]),
                                     float(lf[row].sum()))
    return total


def dp_log_marginal_likelihood(rows, m, alpha, width):
    """Dirichlet-multinomial log-likelihood of the rows with mass ``alpha``."""
    rows = np.atleast_2d(np.asarray(rows, dtype=np.int64))
    if np.any(rows.sum(axis=1) != m):
        raise ValueError("every row must sum to m")
    a = alpha / width
    lf = log_factorials(int(max(m, rows.max())) + 1)
    per_row = (special.gammaln(alpha) - special.gammaln(alpha + m)
               + (special.gammaln(a + rows) - special.gammaln(a)).sum(axis=1)
               + lf[m] - lf[rows].sum(axis=1))
    return float(per_row.sum())


def golden_section_max(f, lo, hi, tol=ALPHA_TOL, known=None):
    """Maximize a unimodal ``f`` on ``[lo, hi]`` until the bracket is ``<= tol`` wide.

    Returns ``(x_best, f_best, iterations, evaluated)`` where ``x_best`` is the
    best point evaluated (``known`` may seed extra evaluated points).
    """
    evaluated = dict(known or {})

    def ev(x):
        if x not in evaluated:
            evaluated[x] = f(x)
        return evaluated[x]

    a, b = lo, hi
    c = b - _INV_PHI * (b - a)
    d = a + _INV_PHI * (b - a)
    fc, fd = ev(c), ev(d)
    it = 0
    while b - a > tol:
        it += 1
        if fc >= fd:
            b, d, fd = d, c, fc
            c = b - _INV_PHI * (b - a)
            fc = ev(c)
        else:
            a, c, fc = c, d, fd
            d = a + _INV_PHI * (b - a)
            fd = ev(d)
    inside = {x: v for x, v in evaluated.items() if lo < x < hi}
    x_best = max(inside, key=lambda x: (inside[x], -x))
    return x_best, inside[x_best], it, evaluated


def _estimate(loglik, tol):
    grid_alphas = [2.0 ** g for g in GRID_EXPONENTS]
    grid_vals = [loglik(a) for a in grid_alphas]
    i = int(np.argmax(grid_vals))
    if i == 0 or i == len(grid_alphas) - 1:
        raise AlphaBoundaryError(
            f"likelihood is maximized at the grid edge alpha={grid_alphas[i]:g}; "
            "the search grid needs to be wider",
            alpha=grid_alphas[i],
        )
    lo, hi = grid_alphas[i - 1], grid_alphas[i + 1]
    x, fx, it, _ = golden_section_max(loglik, lo, hi, tol, known={grid_alphas[i]: grid_vals[i]})
    return AlphaEstimate(
        alpha_hat=float(x),
        log_likelihood_at_hat=float(fx),
        bracket=(lo, hi),
        iterations=it,
        tolerance_met=True,
        grid=tuple(zip(grid_alphas, grid_vals)),
    )


def estimate_alpha_rows(rows, m, width, tol=ALPHA_TOL):
    """Maximize the NIGP likelihood of explicit count rows."""
    cache = LikelihoodCache(rows, m, width)
    return _estimate(lambda a: log_marginal_likelihood(None, m, a, width, cache=cache), tol)


def estimate_alpha(sketch, tol=ALPHA_TOL):
    """Calibrate the NIGP mass from a sketch's counters alone."""
    if sketch.total < 1:
        raise ValueError("cannot calibrate on an empty sketch")
    return estimate_alpha_rows(sketch.rows(), sketch.total, sketch.width, tol)


def estimate_alpha_dp(sketch, tol=ALPHA_TOL):
    """Calibrate the Dirichlet-process mass by maximizing the Dirichlet-multinomial likelihood."""
    if sketch.total < 1:
        raise ValueError("cannot calibrate on an empty sketch")
    rows, m, width = sketch.rows(), sketch.total, sketch.width
    return _estimate(lambda a: dp_log_marginal_likelihood(rows, m, a, width), tol)


def sample_inverse_gaussian(mean, shape, size, rng):
    """Inverse Gaussian draws by transformation with one rejection step.

    The smaller root of the quadratic is formed as ``mean^2 / x_large`` so
    it keeps full precision when ``mean`` is small.
    """
    mean = float(mean)
    shape = float(shape)
    nu = rng.standard_normal(size)
    y = nu * nu
    r = mean / (2.0 * shape)
    x_large = mean + mean * r * y + r * np.sqrt(4.0 * mean * shape * y + (mean * y) ** 2)
    x_small = mean * mean / x_large
    u = rng.random(size)
    return np.where(u <= mean / (mean + x_small), x_small, x_large)


def sample_bucket_rows(alpha, width, depth, m, seed):
    """Draw ``depth`` rows of ``width`` bucket counts summing to ``m``.

    Per row: ``width`` independent inverse Gaussian weights with mean
    ``alpha/width`` and shape ``(alpha/width)^2``, normalized, then a
    multinomial of size ``m``.
    """
    if not alpha > 0:
        raise ValueError("alpha must be positive")
    rng = np.random.default_rng(seed)
    a = alpha / width
    out = np.empty((depth, width), dtype=np.int64)
    for n in range(depth):
        w = sample_inverse_gaussian(a, a * a, width, rng)
        out[n] = rng.multinomial(m, w / w.sum())
    return out
