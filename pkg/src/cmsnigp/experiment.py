"""MAE experiments by true-frequency bin and power-law diagnostics.

An experiment builds a sketch and an exact counter from one stream,
calibrates the Bayesian estimators from the sketch alone, scores every
enabled estimator on the distinct tokens and averages absolute errors within
bins of the true frequency.

Configuration files are flat ``key = value`` lists (``#`` starts a comment)::

    stream.kind = zipf
    stream.s = 1.9
    stream.m = 500000
    stream.seed = 1
    sketch.seed = 7
    sketch.depth = 4
    sketch.width = 160
    estimators = cms, cmm, dp, nigp
"""

from __future__ import annotations

import configparser
import io
import math
import time
from dataclasses import dataclass, field

import numpy as np

from cmsnigp.alpha_estimation import estimate_alpha, estimate_alpha_dp
from cmsnigp.errors import ConfigError
from cmsnigp.posterior import BucketPmfCache, _sketch_posterior
from cmsnigp.sketch import estimate_cmm, new_sketch
from cmsnigp.streams import (
    ExactCounter,
    PartitionStats,
    StreamSpec,
    crp_labels,
    nggp_sample_partitions,
    stream_counts,
)

ESTIMATORS = ("cms", "cmm", "dp", "nigp")
BAYESIAN = ("dp", "nigp")
DEFAULT_EDGES = (0, 1, 2, 4, 8, 16, 32, 64, 128, 256)
OUTPUT_FORMATS = ("csv", "markdown")


def default_bins():
    """``(0,1], (1,2], (2,4], ..., (128,256]`` plus the open-ended ``(256, inf)``."""
    edges = list(DEFAULT_EDGES) + [math.inf]
    return tuple(zip(edges[:-1], edges[1:]))


def bin_label(lo, hi):
    return f"({lo:g},{hi:g}]" if math.isfinite(hi) else f"({lo:g},inf)"


@dataclass(frozen=True)
class ExperimentConfig:
    """One experiment: stream, sketch geometry, estimators and evaluation options."""

    stream: StreamSpec
    sketch_seed: int = 0
    depth: int = 4
    width: int = 160
    estimators: tuple = ESTIMATORS
    bins: tuple = field(default_factory=default_bins)
    eval_sample_per_bin: int | None = None
    eval_seed: int = 0
    repeats: int = 1
    output: str | None = None
    format: str = "csv"

    def __post_init__(self):
        if self.depth < 1 or self.width < 1:
            raise ConfigError("sketch depth and width must be at least 1")
        if not 0 <= self.sketch_seed < 2 ** 64:
            raise ConfigError("sketch seed must be an unsigned 64-bit integer")
        if not self.estimators:
            raise ConfigError("at least one estimator is required")
        bad = [e for e in self.estimators if e not in ESTIMATORS]
        if bad:
            raise ConfigError(f"unknown estimator(s) {bad}; expected a subset of {ESTIMATORS}")
        if len(set(self.estimators)) != len(self.estimators):
            raise ConfigError("estimators must not repeat")
        validate_bins(self.bins)
        if self.eval_sample_per_bin is not None and self.eval_sample_per_bin < 1:
            raise ConfigError("eval_sample_per_bin must be positive")
        if self.repeats < 1:
            raise ConfigError("repeats must be at least 1")
        if self.format not in OUTPUT_FORMATS:
            raise ConfigError(f"format must be one of {OUTPUT_FORMATS}")


def validate_bins(bins):
    if not bins:
        raise ConfigError("at least one bin is required")
    prev_hi = -math.inf
    for lo, hi in bins:
        if not lo < hi:
            raise ConfigError(f"bin ({lo}, {hi}] is empty")
        if lo < prev_hi:
            raise ConfigError("bins must be disjoint and increasing")
        prev_hi = hi


def bins_from_edges(text):
    """Parse ``"0,1,2,4"`` into ``((0,1], (1,2], (2,4])``; ``inf`` is allowed last."""
    try:
        edges = [float(e) for e in text.split(",") if e.strip()]
    except ValueError:
        raise ConfigError(f"cannot parse bin edges {text!r}") from None
    if len(edges) < 2:
        raise ConfigError("bin edges need at least two values")
    bins = tuple(zip(edges[:-1], edges[1:]))
    validate_bins(bins)
    return bins


# --------------------------------------------------------------------------
# Config files

_INT_KEYS = {"stream.m", "stream.seed", "sketch.seed", "sketch.depth", "sketch.width",
             "eval_sample_per_bin", "eval_seed", "repeats"}
_FLOAT_KEYS = {"stream.s", "stream.sigma", "stream.alpha", "stream.beta"}
_STR_KEYS = {"stream.kind", "stream.path", "estimators", "bins", "output", "format"}
CONFIG_KEYS = tuple(sorted(_INT_KEYS | _FLOAT_KEYS | _STR_KEYS))


def parse_config_text(text):
    """Parse flat ``key = value`` text into a dict of typed values."""
    parser = configparser.ConfigParser(interpolation=None, comment_prefixes=("#", ";"),
                                       inline_comment_prefixes=("#",))
    parser.optionxform = str
    try:
        parser.read_string("[experiment]\n" + text)
    except configparser.Error as exc:
        raise ConfigError(f"malformed config: {exc}") from None
    out = {}
    for key, raw in parser["experiment"].items():
        out[key] = _coerce(key, raw)
    return out


def _coerce(key, raw):
    raw = raw.strip()
    if key in _INT_KEYS:
        try:
            return int(raw)
        except ValueError:
            raise ConfigError(f"{key} must be an integer, got {raw!r}") from None
    if key in _FLOAT_KEYS:
        try:
            return float(raw)
        except ValueError:
            raise ConfigError(f"{key} must be a number, got {raw!r}") from None
    if key in _STR_KEYS:
        return raw
    raise ConfigError(f"unknown config key {key!r}; known keys: {', '.join(CONFIG_KEYS)}")


def load_config_file(path):
    try:
        with open(path, encoding="utf-8") as fh:
            return parse_config_text(fh.read())
    except OSError as exc:
        raise ConfigError(f"cannot read config file {path}: {exc.strerror}") from None


def config_from_mapping(values):
    """Build an :class:`ExperimentConfig` from parsed (and possibly overridden) values."""
    unknown = set(values) - set(CONFIG_KEYS)
    if unknown:
        raise ConfigError(f"unknown config key(s) {sorted(unknown)}")
    if "stream.kind" not in values:
        raise ConfigError("stream.kind is required")
    stream = StreamSpec(
        kind=values["stream.kind"],
        m=values.get("stream.m", 0),
        seed=values.get("stream.seed", 0),
        s=values.get("stream.s"),
        sigma=values.get("stream.sigma"),
        alpha=values.get("stream.alpha"),
        beta=values.get("stream.beta"),
        path=values.get("stream.path"),
    )
    kwargs = {}
    for key, name in (("sketch.seed", "sketch_seed"), ("sketch.depth", "depth"),
                      ("sketch.width", "width"), ("eval_sample_per_bin", "eval_sample_per_bin"),
                      ("eval_seed", "eval_seed"), ("repeats", "repeats"), ("output", "output"),
                      ("format", "format")):
        if key in values:
            kwargs[name] = values[key]
    if "estimators" in values:
        kwargs["estimators"] = tuple(e.strip() for e in values["estimators"].split(",") if e.strip())
    if "bins" in values:
        kwargs["bins"] = bins_from_edges(values["bins"])
    return ExperimentConfig(stream=stream, **kwargs)


# --------------------------------------------------------------------------
# Report


@dataclass
class MaeReport:
    """MAE per (bin, estimator), with token counts and run metadata.

    ``mae[e][b]`` is a list with one value per repeat (``nan`` for an empty
    bin); ``counts[b]`` is the number of evaluated tokens in bin ``b`` (equal
    across repeats because it depends only on the true frequencies and the
    evaluation sample).
    """

    bins: tuple
    estimators: tuple
    counts: list
    mae: dict
    alpha_hat: dict = field(default_factory=dict)
    metadata: dict = field(default_factory=dict)
    nigp_exceeds_cms: int = 0

    @property
    def repeats(self):
        return len(next(iter(self.mae.values()))[0]) if self.mae else 0

    def mean(self, estimator, b):
        vals = self.mae[estimator][b]
        return float(np.mean(vals)) if self.counts[b] else math.nan

    def sd(self, estimator, b):
        vals = self.mae[estimator][b]
        if len(vals) < 2 or not self.counts[b]:
            return math.nan
        return float(np.std(vals, ddof=1))

    def rows(self):
        """``(bin label, tokens, {estimator: (mean, sd)})`` per bin."""
        for b, (lo, hi) in enumerate(self.bins):
            yield bin_label(lo, hi), self.counts[b], {
                e: (self.mean(e, b), self.sd(e, b)) for e in self.estimators}

    def to_csv(self):
        """Deterministic CSV: one line per bin, one MAE column (and sd column) per estimator."""
        with_sd = self.repeats > 1
        head = ["bin", "tokens"]
        for e in self.estimators:
            head.append(f"mae_{e}")
            if with_sd:
                head.append(f"sd_{e}")
        lines = [",".join(head)]
        for label, n, vals in self.rows():
            cells = [f'"{label}"', str(n)]
            for e in self.estimators:
                mean, sd = vals[e]
                cells.append(_fmt(mean))
                if with_sd:
                    cells.append(_fmt(sd))
            lines.append(",".join(cells))
        return "\n".join(lines) + "\n"

    def to_markdown(self):
        """Aligned markdown table; with repeats the cells read ``mean ± sd``."""
        head = ["bin", "tokens"] + [e.upper() if e != "nigp" else "NIGP" for e in self.estimators]
        body = []
        for label, n, vals in self.rows():
            cells = [label, str(n)]
            for e in self.estimators:
                mean, sd = vals[e]
                cells.append(_fmt(mean) if math.isnan(sd) else f"{_fmt(mean)} ± {_fmt(sd)}")
            body.append(cells)
        return markdown_table(head, body)


def _fmt(x):
    return "" if math.isnan(x) else f"{x:.4f}"


def markdown_table(head, body):
    """Render rows as a markdown table with padded columns."""
    widths = [max(len(str(r[i])) for r in [head] + body) for i in range(len(head))]
    out = io.StringIO()

    def line(cells):
        out.write("| " + " | ".join(str(c).ljust(w) for c, w in zip(cells, widths)) + " |\n")

    line(head)
    out.write("|" + "|".join("-" * (w + 2) for w in widths) + "|\n")
    for r in body:
        line(r)
    return out.getvalue()


def csv_table(head, body):
    lines = [",".join(head)] + [",".join(str(c) for c in r) for r in body]
    return "\n".join(lines) + "\n"


# --------------------------------------------------------------------------
# Running


def _bin_index(freq, bins):
    for b, (lo, hi) in enumerate(bins):
        if lo < freq <= hi:
            return b
    return None


def _evaluation_tokens(exact, bins, per_bin, seed):
    """Distinct tokens grouped by bin, optionally subsampled per bin (seeded)."""
    grouped = [[] for _ in bins]
    for tok in sorted(exact.counts):
        b = _bin_index(exact.counts[tok], bins)
        if b is not None:
            grouped[b].append(tok)
    if per_bin is not None:
        rng = np.random.default_rng(seed)
        for b, toks in enumerate(grouped):
            if len(toks) > per_bin:
                keep = np.sort(rng.choice(len(toks), size=per_bin, replace=False))
                grouped[b] = [toks[i] for i in keep]
    return grouped


def posterior_means(bvs, cache):
    """Posterior means for an ``(T, N)`` array of bucket vectors sharing one cache."""
    needs = {}
    for bv in bvs:
        lo = int(bv.min())
        for c in bv:
            c = int(c)
            needs[c] = max(needs.get(c, 0), lo)
    cache.prefetch(needs)
    return np.array([_sketch_posterior(bv, cache).mean() for bv in bvs])


@dataclass
class SingleRun:
    """Everything one repeat produced; kept for invariant checks."""

    tokens: list
    truth: np.ndarray
    bucket_vectors: np.ndarray
    estimates: dict
    alpha_hat: dict


def run_single(config, sketch_seed, counts=None):
    """Build, calibrate and score once with hash seed ``sketch_seed``."""
    if counts is None:
        counts = stream_counts(config.stream)
    sketch = new_sketch(sketch_seed, config.depth, config.width)
    exact = ExactCounter()
    sketch.add_counts(counts)
    exact.update(counts)
    exact.freeze()
    grouped = _evaluation_tokens(exact, config.bins, config.eval_sample_per_bin, config.eval_seed)
    tokens = [t for g in grouped for t in g]
    truth = np.array([exact.counts[t] for t in tokens], dtype=np.int64)
    bvs = sketch.bucket_vectors(tokens) if tokens else np.zeros((0, sketch.depth), dtype=np.int64)
    alpha_hat = {}
    estimates = {}
    for e in config.estimators:
        if e == "cms":
            estimates[e] = bvs.min(axis=1).astype(float) if tokens else np.zeros(0)
        elif e == "cmm":
            estimates[e] = np.array([estimate_cmm(bv, sketch.total, sketch.width) for bv in bvs])
        elif e == "nigp":
            # Calibration reads the sketch only; the exact counter is used for scoring.
            alpha_hat[e] = estimate_alpha(sketch).alpha_hat
            cache = BucketPmfCache("nigp", alpha_hat[e] / sketch.width)
            estimates[e] = posterior_means(bvs, cache)
        elif e == "dp":
            alpha_hat[e] = estimate_alpha_dp(sketch).alpha_hat
            cache = BucketPmfCache("dp", alpha_hat[e] / sketch.width)
            estimates[e] = posterior_means(bvs, cache)
    return SingleRun(tokens, truth, bvs, estimates, alpha_hat)


def run_experiment(config, keep_runs=False):
    """Run ``config.repeats`` repeats (hash seeds ``sketch_seed + r``) and build a :class:`MaeReport`.

    With ``keep_runs`` the per-repeat :class:`SingleRun` objects are stored in
    ``report.metadata["runs"]``.
    """
    start = time.perf_counter()
    counts = stream_counts(config.stream)
    bins = config.bins
    mae = {e: [[] for _ in bins] for e in config.estimators}
    alpha_hat = {}
    runs = []
    bin_counts = None
    exceed = 0
    for r in range(config.repeats):
        run = run_single(config, config.sketch_seed + r, counts)
        idx = np.array([_bin_index(f, bins) for f in run.truth], dtype=np.int64)
        if bin_counts is None:
            bin_counts = [int((idx == b).sum()) for b in range(len(bins))]
        for e, est in run.estimates.items():
            err = np.abs(est - run.truth)
            for b in range(len(bins)):
                sel = idx == b
                mae[e][b].append(float(err[sel].mean()) if sel.any() else math.nan)
        for e, a in run.alpha_hat.items():
            alpha_hat.setdefault(e, []).append(a)
        if "nigp" in run.estimates and "cms" in run.estimates:
            exceed += int(np.sum(run.estimates["nigp"] > run.estimates["cms"] + 1e-9))
        if keep_runs:
            runs.append(run)
    meta = {
        "config": config,
        "stream_length": int(sum(counts.values())),
        "distinct_tokens": len(counts),
        "wall_time_s": time.perf_counter() - start,
    }
    if keep_runs:
        meta["runs"] = runs
    return MaeReport(bins, tuple(config.estimators), bin_counts, mae, alpha_hat, meta, exceed)


# --------------------------------------------------------------------------
# Power-law diagnostics


@dataclass
class PowerlawDiagnostics:
    """Growth of the number of blocks and the small-block profile.

    ``growth`` rows are ``(m, mean K_m, sd K_m)``; ``profile`` rows are
    ``(r, mean M_r/K, sd M_r/K)`` at the final ``m``.
    """

    growth: list
    profile: list
    slope: float
    k_final: np.ndarray
    m1_over_k: np.ndarray

    def growth_csv(self):
        return csv_table(["m", "mean_k", "sd_k"],
                         [(m, f"{k:.4f}", f"{s:.4f}") for m, k, s in self.growth])

    def profile_csv(self):
        return csv_table(["r", "mean_mr_over_k", "sd_mr_over_k"],
                         [(r, f"{p:.6f}", f"{s:.6f}") for r, p, s in self.profile])

    def to_markdown(self):
        g = markdown_table(["m", "mean K_m", "sd K_m"],
                           [(m, f"{k:.2f}", f"{s:.2f}") for m, k, s in self.growth])
        p = markdown_table(["r", "mean M_r/K", "sd M_r/K"],
                           [(r, f"{v:.4f}", f"{s:.4f}") for r, v, s in self.profile])
        return g + "\n" + p + f"\nslope of ln K on ln m: {self.slope:.4f}\n"


def growth_grid(m, points=10):
    """Log-spaced checkpoints ending at ``m`` (distinct integers, at least 1)."""
    if m < 1:
        raise ValueError("m must be positive")
    grid = np.unique(np.round(np.geomspace(max(1, m / 10 ** (points / 10)), m, points)).astype(int))
    return [int(g) for g in grid if g >= 1]


def diagnostics_powerlaw(spec, repeats, grid=None, max_r=10, slope_from=None):
    """Sample ``repeats`` partitions and summarize ``K_m`` growth and ``M_r / K``.

    ``spec.kind`` must be ``"nggp"`` or ``"dp"``; seeds are ``spec.seed + i``.
    The slope is fitted to ``ln mean K_m`` against ``ln m`` over grid points
    ``>= slope_from`` (default: the last decade of the grid).
    """
    if spec.kind not in ("nggp", "dp"):
        raise ConfigError("power-law diagnostics need an nggp or dp stream")
    if repeats < 1:
        raise ConfigError("repeats must be at least 1")
    grid = sorted(set(grid or growth_grid(spec.m)))
    if grid[-1] != spec.m:
        grid.append(spec.m)
    seeds = [spec.seed + i for i in range(repeats)]
    if spec.kind == "nggp":
        results = nggp_sample_partitions(spec.m, spec.alpha, spec.sigma, seeds, checkpoints=grid)
        stats = [r[0] for r in results]
        traces = np.array([r[2] for r in results], dtype=float)
    else:
        stats = []
        traces = []
        for s in seeds:
            labels, _ = crp_labels(spec.m, spec.beta, s)
            # Labels are numbered in order of first appearance.
            first_k = np.maximum.accumulate(labels) + 1
            traces.append([first_k[g - 1] for g in grid])
            stats.append(PartitionStats.from_block_sizes(np.bincount(labels)))
        traces = np.array(traces, dtype=float)
    mean_k = traces.mean(axis=0)
    sd_k = traces.std(axis=0, ddof=1) if repeats > 1 else np.zeros_like(mean_k)
    growth = [(g, float(k), float(s)) for g, k, s in zip(grid, mean_k, sd_k)]
    lo = slope_from if slope_from is not None else spec.m / 10
    sel = np.array(grid) >= lo
    if sel.sum() >= 2:
        slope = float(np.polyfit(np.log(np.array(grid)[sel]), np.log(mean_k[sel]), 1)[0])
    else:
        slope = math.nan
    props = np.array([[st.proportion(r) for r in range(1, max_r + 1)] for st in stats])
    psd = props.std(axis=0, ddof=1) if repeats > 1 else np.zeros(max_r)
    profile = [(r, float(props[:, r - 1].mean()), float(psd[r - 1])) for r in range(1, max_r + 1)]
    return PowerlawDiagnostics(growth, profile, slope, traces[:, -1], props[:, 0])

