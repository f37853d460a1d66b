"""Command-line entry point.

Subcommands::

    cmsnigp experiment run --config FILE [overrides]
    cmsnigp sketch build --seed S --depth N --width J --input FILE --format plain|uci_bagofwords --output FILE
    cmsnigp sketch calibrate --sketch FILE
    cmsnigp sketch query --sketch FILE [--alpha A]     (tokens on stdin, one per line)
    cmsnigp diagnose powerlaw --sigma S --alpha A --m M --repeats R

Exit status: 0 on success, 2 for configuration or input errors, 3 when a
numerical routine fails.
"""

from __future__ import annotations

import argparse
import json
import math
import sys

from cmsnigp.alpha_estimation import estimate_alpha
from cmsnigp.errors import ConfigError, NumericalError, ParseError, SketchFormatError
from cmsnigp.experiment import (
    config_from_mapping,
    csv_table,
    diagnostics_powerlaw,
    load_config_file,
    markdown_table,
    run_experiment,
)
from cmsnigp.posterior import BucketPmfCache, nigp_sketch_posterior, NigpModel
from cmsnigp.sketch import estimate_cmm, estimate_cms, load, new_sketch, save
from cmsnigp.streams import StreamSpec, text_counts

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERIC = 3

# Command-line flag -> config key for ``experiment run`` overrides.
_OVERRIDES = {
    "stream_kind": "stream.kind",
    "stream_m": "stream.m",
    "stream_seed": "stream.seed",
    "stream_s": "stream.s",
    "stream_sigma": "stream.sigma",
    "stream_alpha": "stream.alpha",
    "stream_beta": "stream.beta",
    "stream_path": "stream.path",
    "sketch_seed": "sketch.seed",
    "depth": "sketch.depth",
    "width": "sketch.width",
    "estimators": "estimators",
    "bins": "bins",
    "eval_sample_per_bin": "eval_sample_per_bin",
    "eval_seed": "eval_seed",
    "repeats": "repeats",
    "output": "output",
    "format": "format",
}


def calibration_path(sketch_path):
    """Where ``sketch calibrate`` stores the fitted mass for a sketch file."""
    return str(sketch_path) + ".alpha.json"


def _emit(text, path=None):
    if path:
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(text)
    else:
        sys.stdout.write(text)


def cmd_experiment_run(args):
    values = load_config_file(args.config) if args.config else {}
    for flag, key in _OVERRIDES.items():
        v = getattr(args, flag)
        if v is not None:
            values[key] = v
    config = config_from_mapping(values)
    report = run_experiment(config)
    text = report.to_csv() if config.format == "csv" else report.to_markdown()
    _emit(text, config.output)
    for est, vals in sorted(report.alpha_hat.items()):
        print(f"alpha_hat[{est}] = {', '.join(f'{a:.6g}' for a in vals)}", file=sys.stderr)
    if report.nigp_exceeds_cms:
        print(f"warning: NIGP mean exceeded CMS on {report.nigp_exceeds_cms} queries", file=sys.stderr)
    print(f"wall time {report.metadata['wall_time_s']:.1f} s", file=sys.stderr)
    return EXIT_OK


def cmd_sketch_build(args):
    sketch = new_sketch(args.seed, args.depth, args.width)
    sketch.add_counts(text_counts(args.input, args.format))
    save(sketch, args.output)
    print(f"wrote {args.output}: depth={sketch.depth} width={sketch.width} total={sketch.total}",
          file=sys.stderr)
    return EXIT_OK


def cmd_sketch_calibrate(args):
    sketch = load(args.sketch)
    est = estimate_alpha(sketch)
    with open(calibration_path(args.sketch), "w", encoding="utf-8") as fh:
        json.dump({"alpha": est.alpha_hat, "log_likelihood": est.log_likelihood_at_hat,
                   "total": sketch.total}, fh, indent=2)
        fh.write("\n")
    print(f"{est.alpha_hat:.10g}")
    return EXIT_OK


def _stored_alpha(sketch_path, sketch):
    try:
        with open(calibration_path(sketch_path), encoding="utf-8") as fh:
            data = json.load(fh)
    except FileNotFoundError:
        return None
    except (OSError, ValueError) as exc:
        raise ConfigError(f"unreadable calibration file: {exc}") from None
    if data.get("total") != sketch.total or not isinstance(data.get("alpha"), (int, float)):
        raise ConfigError("calibration file does not match the sketch; rerun 'sketch calibrate'")
    return float(data["alpha"])


def cmd_sketch_query(args):
    sketch = load(args.sketch)
    alpha = args.alpha if args.alpha is not None else _stored_alpha(args.sketch, sketch)
    if alpha is not None and not (alpha > 0 and math.isfinite(alpha)):
        raise ConfigError("--alpha must be positive and finite")
    tokens = [line.strip() for line in sys.stdin if line.strip()]
    head = ["token", "cms", "cmm"]
    if alpha is not None:
        head += ["nigp_mean", "nigp_median", "nigp_mode", "ci_low", "ci_high"]
        model = NigpModel(alpha, sketch.width)
        cache = BucketPmfCache("nigp", model.bucket_alpha)
    else:
        print("no --alpha given and no calibration file found; reporting cms and cmm only",
              file=sys.stderr)
    body = []
    for tok in tokens:
        bv = sketch.bucket_vector(tok)
        row = [tok, str(estimate_cms(bv)), f"{estimate_cmm(bv, sketch.total, sketch.width):.4f}"]
        if alpha is not None:
            post = nigp_sketch_posterior(bv, model, cache)
            lo, hi = post.credible_interval(args.level)
            row += [f"{post.mean():.4f}", str(post.median()), str(post.mode()), str(lo), str(hi)]
        body.append(row)
    sys.stdout.write(csv_table(head, body) if args.format == "csv" else markdown_table(head, body))
    return EXIT_OK


def cmd_diagnose_powerlaw(args):
    if args.sigma == 0:
        # The sigma -> 0 limit of the process is a Dirichlet process with mass alpha / 2.
        spec = StreamSpec("dp", m=args.m, seed=args.seed, beta=args.alpha / 2.0)
    else:
        spec = StreamSpec("nggp", m=args.m, seed=args.seed, sigma=args.sigma, alpha=args.alpha)
    diag = diagnostics_powerlaw(spec, args.repeats, max_r=args.max_r)
    if args.format == "csv":
        text = diag.growth_csv() + "\n" + diag.profile_csv()
    else:
        text = diag.to_markdown()
    _emit(text, args.output)
    print(f"slope of ln K on ln m: {diag.slope:.4f}", file=sys.stderr)
    return EXIT_OK


def build_parser():
    parser = argparse.ArgumentParser(prog="cmsnigp", description="Count-min sketch with NIGP point queries.")
    sub = parser.add_subparsers(dest="group", required=True)

    exp = sub.add_parser("experiment", help="MAE experiments").add_subparsers(dest="action", required=True)
    run = exp.add_parser("run", help="run an experiment from a config file")
    run.add_argument("--config", help="flat key = value config file")
    run.add_argument("--stream-kind", dest="stream_kind")
    run.add_argument("--m", dest="stream_m", type=int)
    run.add_argument("--stream-seed", type=int)
    run.add_argument("--s", dest="stream_s", type=float, help="Zipf exponent")
    run.add_argument("--sigma", dest="stream_sigma", type=float)
    run.add_argument("--alpha", dest="stream_alpha", type=float)
    run.add_argument("--beta", dest="stream_beta", type=float)
    run.add_argument("--input", dest="stream_path")
    run.add_argument("--sketch-seed", type=int)
    run.add_argument("--depth", type=int)
    run.add_argument("--width", type=int)
    run.add_argument("--estimators", help="comma-separated subset of cms,cmm,dp,nigp")
    run.add_argument("--bins", help="comma-separated bin edges, e.g. 0,1,2,4,inf")
    run.add_argument("--eval-sample-per-bin", type=int)
    run.add_argument("--eval-seed", type=int)
    run.add_argument("--repeats", type=int)
    run.add_argument("--output")
    run.add_argument("--format", choices=("csv", "markdown"))
    run.set_defaults(func=cmd_experiment_run)

    sk = sub.add_parser("sketch", help="build and query sketch files").add_subparsers(dest="action", required=True)
    build = sk.add_parser("build", help="build a sketch from a text file")
    build.add_argument("--seed", type=int, required=True)
    build.add_argument("--depth", type=int, required=True)
    build.add_argument("--width", type=int, required=True)
    build.add_argument("--input", required=True)
    build.add_argument("--format", choices=("plain", "uci_bagofwords"), default="plain")
    build.add_argument("--output", required=True)
    build.set_defaults(func=cmd_sketch_build)

    cal = sk.add_parser("calibrate", help="fit the NIGP mass and store it next to the sketch")
    cal.add_argument("--sketch", required=True)
    cal.set_defaults(func=cmd_sketch_calibrate)

    query = sk.add_parser("query", help="point queries for tokens read from stdin")
    query.add_argument("--sketch", required=True)
    query.add_argument("--alpha", type=float)
    query.add_argument("--level", type=float, default=0.95, help="credible interval level")
    query.add_argument("--format", choices=("csv", "markdown"), default="csv")
    query.set_defaults(func=cmd_sketch_query)

    diag = sub.add_parser("diagnose", help="diagnostics").add_subparsers(dest="action", required=True)
    pl = diag.add_parser("powerlaw", help="block growth and multiplicity profile of sampled partitions")
    pl.add_argument("--sigma", type=float, required=True, help="0 selects the Dirichlet-process limit")
    pl.add_argument("--alpha", type=float, required=True)
    pl.add_argument("--m", type=int, required=True)
    pl.add_argument("--repeats", type=int, default=1)
    pl.add_argument("--seed", type=int, default=0)
    pl.add_argument("--max-r", type=int, default=10)
    pl.add_argument("--output")
    pl.add_argument("--format", choices=("csv", "markdown"), default="csv")
    pl.set_defaults(func=cmd_diagnose_powerlaw)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, SketchFormatError, ParseError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (NumericalError, ArithmeticError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
