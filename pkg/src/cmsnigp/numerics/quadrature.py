"""Double-exponential (tanh-sinh family) quadrature in log-space.

Each rule maps a trapezoid grid ``t = k h`` (``|t| <= t_max``) through an
inner coordinate ``s = center + scale * (pi/2) * sinh(t)`` and then onto the
integration domain:

* ``"unit"``      ``x = 1 / (1 + exp(-s))``   on (0, 1)
* ``"half"``      ``x = exp(s)``              on (0, inf)
* ``"symmetric"`` ``x = tanh(s)``             on (-1, 1)

With ``center = 0`` the standard rules are recovered (``scale`` 2, 1 and 1
respectively, ``t_max = 4.5``). A non-zero center and a smaller scale put the
grid on the bulk of a sharply peaked integrand; :func:`integrate_log_auto`
and :func:`integrate_log_batch` choose them from the integrand's mode and
curvature, and use a shorter ``t`` range because the centred integrand is
already negligible a few widths away from the peak. An edge check widens the
rule whenever that assumption fails.

Integrals are returned as natural logs, accumulated with log-sum-exp, so
integrands far outside the double range are fine as long as their logs are.

Convergence is declared when two successive levels agree within ``tol``
or within the rounding noise of the log-integrand itself (a few ulps of the
largest ``|ln f|`` seen), whichever is larger: a log-integrand of size
``1e6`` cannot be resolved to ``1e-10`` in double precision.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit, log_expit

from cmsnigp.errors import QuadratureError
from cmsnigp.numerics.special import log_sum_exp

T_MAX = 4.5
T_MAX_CENTRED = 2.5
DOMAINS = ("unit", "half", "symmetric")
STANDARD_SCALE = {"unit": 2.0, "half": 1.0, "symmetric": 1.0}
DEFAULT_TOL = 1e-10
MAX_LEVEL = 12
_HALF_PI = 0.5 * math.pi
_LOG2 = math.log(2.0)
# Extreme-node share of the total above which a rule is considered too narrow.
_EDGE_LOG_SHARE = -36.0
# Multiple of eps * max|ln f| accepted as the resolution limit of a log-integral.
_NOISE_ULPS = 64.0


@dataclass(frozen=True)
class QuadratureRule:
    """Nodes and log-weights of one double-exponential rule.

    ``complements`` holds ``1 - x`` for the unit domain (computed without
    cancellation) and ``1 - |x|`` for the symmetric domain; it is ``None`` on
    the half line.
    """

    domain: str
    level: int
    nodes: np.ndarray
    log_weights: np.ndarray
    center: float = 0.0
    scale: float = 1.0
    complements: np.ndarray | None = field(default=None, repr=False)
    t_max: float = T_MAX

    def __len__(self):
        return int(self.nodes.shape[0])


def _grid(level, odd_only, t_max=T_MAX):
    h = 2.0 ** (-level)
    kmax = int(math.floor(t_max / h))
    k = np.arange(-kmax, kmax + 1)
    if odd_only:
        k = k[k % 2 != 0]
    return k * h, h


def _inner_to_domain(domain, s):
    """Map inner coordinates to ``(x, complement, ln dx/ds)`` element-wise."""
    if domain == "unit":
        return expit(s), expit(-s), log_expit(s) + log_expit(-s)
    if domain == "half":
        with np.errstate(over="ignore"):
            return np.exp(s), None, s
    a = np.abs(s)
    e = np.exp(-2.0 * a)
    # 1 - |tanh s| = 2 e^{-2|s|} / (1 + e^{-2|s|}),  sech^2 s = 4 e^{-2|s|} / (1 + e^{-2|s|})^2
    return np.tanh(s), 2.0 * e / (1.0 + e), 2.0 * (_LOG2 - a - np.log1p(e))


def _node_ok(domain, x, xc):
    if domain == "half":
        return (x > 0) & np.isfinite(x)
    if domain == "unit":
        return (x > 0) & (xc > 0)
    return xc > 0


def tanh_sinh_rule(domain, level, center=0.0, scale=None, odd_only=False, t_max=T_MAX):
    """Build the double-exponential rule with step ``2**-level``.

    Args:
        domain: ``"unit"``, ``"half"`` or ``"symmetric"``.
        level: non-negative refinement depth.
        center: shift of the inner coordinate ``s``.
        scale: multiplier of ``(pi/2) sinh t``; defaults to the standard value.
        odd_only: keep only the nodes new at this level (used for refinement).
        t_max: truncation of the ``t`` grid.
    """
    if domain not in DOMAINS:
        raise ValueError(f"unknown domain {domain!r}; expected one of {DOMAINS}")
    if level < 0:
        raise ValueError("level must be non-negative")
    if scale is None:
        scale = STANDARD_SCALE[domain]
    if not scale > 0:
        raise ValueError("scale must be positive")
    t, h = _grid(level, odd_only and level > 0, t_max)
    s = center + scale * _HALF_PI * np.sinh(t)
    x, xc, jac = _inner_to_domain(domain, s)
    log_w = math.log(h) + math.log(scale * _HALF_PI) + np.log(np.cosh(t)) + jac
    keep = _node_ok(domain, x, xc)
    return QuadratureRule(domain, level, x[keep], log_w[keep], float(center), float(scale),
                          None if xc is None else xc[keep], float(t_max))


def _evaluate(f_log, rule, pass_complement):
    """Return ``(terms, max|ln f|)`` for one rule."""
    if pass_complement and rule.complements is not None:
        vals = f_log(rule.nodes, rule.complements)
    else:
        vals = f_log(rule.nodes)
    vals = np.asarray(vals, dtype=float)
    if np.any(np.isnan(vals)) or np.any(vals == np.inf):
        raise QuadratureError("integrand returned NaN or +inf")
    terms = rule.log_weights + vals
    return terms, _significant_magnitude(terms, vals)


def _significant_magnitude(terms, vals):
    """Largest ``|ln f|`` among nodes that contribute measurably to the sum (per row)."""
    peak = terms.max(axis=-1, keepdims=True)
    with np.errstate(invalid="ignore"):
        keep = np.isfinite(terms) & (terms >= peak - 40.0)
    return np.where(keep, np.abs(np.where(np.isfinite(vals), vals, 0.0)), 0.0).max(axis=-1)


def _effective_tol(tol, magnitude):
    return max(tol, _NOISE_ULPS * np.finfo(float).eps * magnitude)


def integrate_log(f_log, rule, tol=DEFAULT_TOL, max_level=MAX_LEVEL, pass_complement=False,
                  _initial=None):
    """Return ``ln ∫ f`` for ``f = exp(f_log)`` over ``rule.domain``.

    Starts from ``rule`` and halves the step (reusing every previous node)
    until two successive log-estimates differ by at most ``tol`` (or by the
    rounding noise of ``f_log``). Raises :class:`QuadratureError` with both
    estimates if ``max_level`` is reached first.

    ``f_log`` must accept a numpy array of nodes and return ``ln f`` at each
    (``-inf`` where ``f`` vanishes). With ``pass_complement`` it is called as
    ``f_log(x, 1 - x)`` on the unit and symmetric domains.
    """
    if _initial is None:
        terms, mag = _evaluate(f_log, rule, pass_complement)
        est = log_sum_exp(terms)
    else:
        est, mag = _initial
    level = rule.level
    prev = None
    while level < max_level:
        level += 1
        odd = tanh_sinh_rule(rule.domain, level, rule.center, rule.scale, odd_only=True,
                             t_max=rule.t_max)
        if len(odd):
            terms, m_odd = _evaluate(f_log, odd, pass_complement)
            new = log_sum_exp(terms)
            mag = max(mag, float(m_odd))
        else:
            new = -np.inf
        prev, est = est, float(np.logaddexp(est - _LOG2, new))
        if est == -np.inf and prev == -np.inf:
            return est
        if abs(est - prev) <= _effective_tol(tol, mag):
            return est
    raise QuadratureError(
        f"quadrature did not reach tolerance {tol:g} by level {max_level}",
        previous=prev,
        last=est,
    )


def _profile(f_log, domain, s, pass_complement):
    """``G(s) = ln f(x(s)) + ln dx/ds`` at inner coordinates ``s`` (1-D)."""
    s = np.asarray(s, dtype=float)
    x, xc, jac = _inner_to_domain(domain, s)
    with np.errstate(all="ignore"):
        vals = f_log(x, xc) if (pass_complement and xc is not None) else f_log(x)
    vals = np.where(np.isnan(vals), -np.inf, np.asarray(vals, dtype=float))
    return vals + jac


def locate_peak(f_log, domain, pass_complement=False, start=None, scan_level=2):
    """Find the mode ``s*`` of the integrand in the inner coordinate and its width.

    Returns ``(center, scale)`` suited to :func:`tanh_sinh_rule`. The scale is
    ``1 / sqrt(curvature)`` at the mode, capped at the standard scale.
    Without a ``start`` guess the standard rule's inner grid is scanned first.
    """
    std = STANDARD_SCALE[domain]
    if start is None:
        t, _ = _grid(scan_level, False)
        s_grid = std * _HALF_PI * np.sinh(t)
        g = _profile(f_log, domain, s_grid, pass_complement)
        if not np.any(np.isfinite(g)):
            return 0.0, std
        s0 = float(s_grid[int(np.argmax(g))])
    else:
        s0 = float(start)
    s, curv = _newton_peak(lambda u: _profile(f_log, domain, u, pass_complement), s0)
    if not np.isfinite(s):
        return 0.0, std
    if not (curv > 0 and np.isfinite(curv)):
        return s, std
    return s, float(min(std, 1.0 / math.sqrt(curv)))


def _fd_step(s, curv):
    d = 1e-3 * max(1.0, abs(s))
    if curv > 0 and np.isfinite(curv):
        d = min(d, 0.05 / math.sqrt(curv))
    return d


def _newton_peak(g, s0, iters=30):
    """Safeguarded Newton ascent of a 1-D profile using central differences."""
    s = s0
    curv = float("nan")
    for _ in range(iters):
        d = _fd_step(s, curv)
        gm, g0, gp = g(np.array([s - d, s, s + d]))
        if not np.isfinite(g0):
            break
        grad = (gp - gm) / (2.0 * d)
        c = -(gp - 2.0 * g0 + gm) / (d * d)
        if not (c > 0 and np.isfinite(c)):
            # Not locally concave: climb in the uphill direction with a bounded step.
            step = math.copysign(max(1.0, abs(s)) * 0.5, grad) if np.isfinite(grad) else 0.0
            if step == 0.0:
                break
            cand = s + step
            if g(np.array([cand]))[0] > g0:
                s = cand
                continue
            break
        curv = c
        step = grad / curv
        limit = 3.0 / math.sqrt(curv) + 1.0
        step = max(-limit, min(limit, step))
        s_new = s + step
        if g(np.array([s_new]))[0] < g0:
            s_new = s + 0.5 * step
            if g(np.array([s_new]))[0] < g0:
                break
        if abs(s_new - s) < 1e-6 / math.sqrt(curv):
            s = s_new
            break
        s = s_new
    return s, curv


def _edge_share(terms, total):
    if total == -np.inf:
        return -np.inf
    k = max(1, terms.shape[0] // 20)
    return log_sum_exp(np.concatenate([terms[:k], terms[-k:]])) - total


def integrate_log_auto(f_log, domain, tol=DEFAULT_TOL, max_level=MAX_LEVEL,
                       pass_complement=False, start_level=1, start=None, info=None):
    """Like :func:`integrate_log` but with a rule centred on the integrand's peak.

    The rule is widened (scale times 4, then the full standard rule) while
    its outermost nodes still carry a non-negligible share of the mass.

    ``start`` is an optional inner-coordinate guess for the peak (skipping
    the coarse scan); if ``info`` is a dict it receives the final
    ``center`` and ``scale``.
    """
    center, scale = locate_peak(f_log, domain, pass_complement, start=start)
    std = STANDARD_SCALE[domain]
    while True:
        standard = scale >= std
        t_max = T_MAX if standard else T_MAX_CENTRED
        rule = tanh_sinh_rule(domain, start_level, center, scale, t_max=t_max)
        terms, mag = _evaluate(f_log, rule, pass_complement)
        total = log_sum_exp(terms)
        if standard or _edge_share(terms, total) <= _EDGE_LOG_SHARE:
            break
        scale = min(std, 4.0 * scale)
    if info is not None:
        info["center"] = center
        info["scale"] = scale
    return integrate_log(f_log, rule, tol=tol, max_level=max_level,
                         pass_complement=pass_complement, _initial=(total, mag))


# --------------------------------------------------------------------------
# Batches of integrands, each with its own centred rule


def batch_profile(f_log, domain, s, rows):
    """``ln f + ln dx/ds`` for a batch integrand at inner points ``s`` (2-D)."""
    x, xc, jac = _inner_to_domain(domain, s)
    with np.errstate(all="ignore"):
        vals = np.asarray(f_log(x, xc, rows), dtype=float)
    return np.where(np.isnan(vals), -np.inf, vals) + jac


def scan_peaks_batch(f_log, domain, n, scan_level=3):
    """Coarse per-integrand peak guesses from the standard rule's inner grid."""
    t, _ = _grid(scan_level, False)
    s_grid = STANDARD_SCALE[domain] * _HALF_PI * np.sinh(t)
    g = batch_profile(f_log, domain, np.broadcast_to(s_grid, (n, s_grid.size)).copy(), np.arange(n))
    return s_grid[np.argmax(g, axis=1)]


def locate_peaks_batch(f_log, domain, s0, iters=12):
    """Vectorized safeguarded Newton ascent of the inner-coordinate profiles.

    ``f_log(x, xc, rows)`` evaluates a family of integrands: row ``r`` of
    ``x`` belongs to integrand ``rows[r]``. Starting points ``s0`` are refined
    independently; returns ``(centers, scales)`` as in :func:`locate_peak`.
    """
    std = STANDARD_SCALE[domain]
    s = np.array(s0, dtype=float)
    rows = np.arange(s.shape[0])
    curv = np.full(s.shape, np.nan)
    active = np.isfinite(s)
    for _ in range(iters):
        if not np.any(active):
            break
        idx = rows[active]
        sa = s[idx]
        ca = curv[idx]
        d = 1e-3 * np.maximum(1.0, np.abs(sa))
        known = (ca > 0) & np.isfinite(ca)
        d = np.where(known, np.minimum(d, 0.05 / np.sqrt(np.where(known, ca, 1.0))), d)
        pts = np.stack([sa - d, sa, sa + d], axis=1)
        g = batch_profile(f_log, domain, pts, idx)
        gm, g0, gp = g[:, 0], g[:, 1], g[:, 2]
        grad = (gp - gm) / (2.0 * d)
        c = -(gp - 2.0 * g0 + gm) / (d * d)
        concave = (c > 0) & np.isfinite(c) & np.isfinite(grad)
        curv[idx] = np.where(concave, c, curv[idx])
        safe_c = np.where(concave, c, 1.0)
        step = np.where(concave, grad / safe_c,
                        np.sign(np.nan_to_num(grad)) * np.maximum(1.0, np.abs(sa)) * 0.5)
        limit = np.where(concave, 3.0 / np.sqrt(safe_c) + 1.0, np.inf)
        step = np.clip(step, -limit, limit)
        # Accept the step only if it does not decrease the profile; otherwise try half of it.
        trial = np.stack([sa + step, sa + 0.5 * step], axis=1)
        gt = batch_profile(f_log, domain, trial, idx)
        full_ok = gt[:, 0] >= g0
        half_ok = gt[:, 1] >= g0
        new = np.where(full_ok, trial[:, 0], np.where(half_ok, trial[:, 1], sa))
        resolution = np.where(concave, 1e-6 / np.sqrt(safe_c), 1e-9 * np.maximum(1.0, np.abs(sa)))
        moved = np.abs(new - sa) > resolution
        s[idx] = new
        active[idx] = moved & np.isfinite(g0)
    good = (curv > 0) & np.isfinite(curv) & np.isfinite(s)
    scales = np.where(good, np.minimum(std, 1.0 / np.sqrt(np.where(good, curv, 1.0))), std)
    centers = np.where(np.isfinite(s), s, 0.0)
    return centers, scales


def _batch_terms(f_log, domain, t, h, centers, scales, rows):
    s = centers[:, None] + scales[:, None] * (_HALF_PI * np.sinh(t))[None, :]
    log_ds = math.log(h) + np.log(scales * _HALF_PI)[:, None] + np.log(np.cosh(t))[None, :]
    x, xc, jac = _inner_to_domain(domain, s)
    with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
        vals = np.asarray(f_log(x, xc, rows), dtype=float)
    vals = np.where(_node_ok(domain, x, xc), vals, -np.inf)
    if np.any(np.isnan(vals)) or np.any(vals == np.inf):
        raise QuadratureError("integrand returned NaN or +inf")
    terms = log_ds + jac + vals
    return terms, _significant_magnitude(terms, vals)


def _row_lse(terms):
    peak = terms.max(axis=1)
    shift = np.where(np.isfinite(peak), peak, 0.0)
    with np.errstate(divide="ignore"):
        out = np.log(np.exp(terms - shift[:, None]).sum(axis=1)) + shift
    return np.where(np.isneginf(peak), -np.inf, out)


def integrate_log_batch(f_log, domain, centers, scales, tol=DEFAULT_TOL, start_level=2,
                        max_level=MAX_LEVEL, chunk_elems=2_000_000):
    """Integrate a family of integrands, each with its own centred rule.

    ``f_log(x, xc, rows)`` receives 2-D node arrays whose row ``r`` belongs to
    integrand ``rows[r]`` (``xc`` is ``1 - x`` on the unit domain, ``None`` on
    the half line). Every integrand is refined on its own until successive
    levels agree; rules whose outermost nodes still carry mass are widened
    first. Returns the array of log-integrals.
    """
    centers = np.asarray(centers, dtype=float).copy()
    scales = np.asarray(scales, dtype=float).copy()
    n = centers.shape[0]
    std = STANDARD_SCALE[domain]
    t_max = np.where(scales >= std, T_MAX, T_MAX_CENTRED)
    out = np.full(n, np.nan)
    est = np.empty(n)
    mag = np.zeros(n)

    def run(rows, level, odd_only):
        res = np.empty(rows.shape[0])
        edge = np.empty(rows.shape[0])
        mags = np.empty(rows.shape[0])
        for tm in np.unique(t_max[rows]):
            grp = np.flatnonzero(t_max[rows] == tm)
            t, h = _grid(level, odd_only, tm)
            step = max(1, chunk_elems // max(1, t.shape[0]))
            for a in range(0, grp.size, step):
                loc = grp[a:a + step]
                r = rows[loc]
                terms, mg = _batch_terms(f_log, domain, t, h, centers[r], scales[r], r)
                res[loc] = _row_lse(terms)
                mags[loc] = mg
                k = max(1, terms.shape[1] // 20)
                edge[loc] = _row_lse(np.concatenate([terms[:, :k], terms[:, -k:]], axis=1))
        return res, edge, mags

    pending = np.arange(n)
    # Widen rules whose tails are cut off.
    while pending.size:
        res, edge, mg = run(pending, start_level, False)
        est[pending] = res
        mag[pending] = mg
        narrow = (edge - res > _EDGE_LOG_SHARE) & (scales[pending] < std) & np.isfinite(res)
        pending = pending[narrow]
        scales[pending] = np.minimum(std, 4.0 * scales[pending])
        t_max[pending] = np.where(scales[pending] >= std, T_MAX, T_MAX_CENTRED)

    active = np.arange(n)
    level = start_level
    prev = est.copy()
    eps = np.finfo(float).eps
    while active.size:
        if level >= max_level:
            worst = int(active[0])
            raise QuadratureError(
                f"batch quadrature did not reach tolerance {tol:g} by level {max_level} "
                f"for {active.size} integrand(s)",
                previous=float(prev[worst]),
                last=float(est[worst]),
            )
        level += 1
        odd, _, mg = run(active, level, True)
        mag[active] = np.maximum(mag[active], mg)
        prev[active] = est[active]
        est[active] = np.logaddexp(est[active] - _LOG2, odd)
        both_zero = np.isneginf(est[active]) & np.isneginf(prev[active])
        tol_eff = np.maximum(tol, _NOISE_ULPS * eps * mag[active])
        done = both_zero | (np.abs(est[active] - prev[active]) <= tol_eff)
        out[active[done]] = est[active[done]]
        active = active[~done]
    return out
