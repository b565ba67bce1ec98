"""``cdrshock`` command line.

Every stage is a subcommand; ``run`` executes several in dependency order.
Settings come from (lowest to highest precedence) built-in defaults, values
derived by the ``synth`` stage, ``--config FILE``, and command-line flags
(``--set key=value`` or the dedicated flags).  See :mod:`cdrshock.config` for
the key reference.

Exit status is 0 when every requested stage succeeded, 1 on a pipeline or
input error and 2 on a usage error.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from . import __version__
from .config import ConfigError, parse_value, read_config
from .pipeline import STAGES, Pipeline, PipelineError

logger = logging.getLogger("cdrshock")

# dedicated flags: (dest, config key, help)
_STAGE_FLAGS = {
    "break": [
        ("cluster", "plant_cluster", "cluster id to analyse"),
        ("break_threshold", "break_threshold", "minimal relative SSE reduction"),
        ("min_margin", "min_margin", "days excluded at each end of the scan"),
    ],
    "classify": [
        ("cluster", "plant_cluster", "cluster id to analyse"),
        ("layoff_date", "layoff_date", "layoff date (YYYY-MM-DD); default: break stage result"),
        ("gamma", "gamma", "prior share of laid-off users"),
        ("d", "d", "expected drop in calling-day fraction"),
        ("threshold", "classify_threshold", "affected if p_laidoff exceeds this"),
    ],
    "metrics": [
        ("layoff_date", "layoff_date", "layoff date (YYYY-MM-DD)"),
        ("baseline_month", "baseline_month", "normalisation month t* (YYYY-MM)"),
        ("n_boot", "n_boot", "bootstrap replicates for percent changes"),
    ],
    "forecast": [
        ("family", "forecast.families", "comma-separated model families (AR1,AR1_QUAD,AR1_GDP)"),
        ("horizon", "forecast.horizons", "comma-separated horizons (nowcast,ahead)"),
        ("k", "k", "users sampled per province (user_ratios input only)"),
        ("n_boot", "n_boot", "bootstrap replicates"),
    ],
    "rsd": [
        ("k_grid", "rsd.k_grid", "comma-separated sample sizes"),
        ("T", "rsd.T", "repeats per sample size"),
    ],
}


def _global_parser(suppress: bool = False) -> argparse.ArgumentParser:
    # subcommands repeat the global flags; suppressed defaults keep a flag given
    # before the subcommand from being reset by the subparser
    def dflt(v):
        return argparse.SUPPRESS if suppress else v

    g = argparse.ArgumentParser(add_help=False)
    g.add_argument("--config", type=Path, default=dflt(None), help="key = value configuration file")
    g.add_argument("--seed", type=int, default=dflt(None), help="master seed")
    g.add_argument("--threads", type=int, default=dflt(None), help="worker cap; results do not depend on it")
    g.add_argument("--output", type=Path, default=dflt(None), help="output directory (default: out)")
    g.add_argument("--set", dest="overrides", action="append", default=dflt([]), metavar="KEY=VALUE", help="override any config key (repeatable)")
    g.add_argument("-v", "--verbose", action="count", default=dflt(0), help="more logging")
    return g


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cdrshock", description="Layoff detection and unemployment forecasting from call detail records.", parents=[_global_parser()])
    glob = _global_parser(suppress=True)
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    helps = {
        "synth": "generate a synthetic town corpus and province panel",
        "break": "detect the community break and per-user breaks",
        "classify": "posterior layoff probabilities for regular users",
        "metrics": "monthly features, group differences and difference regressions",
        "forecast": "PCA and cross-validated unemployment forecasts",
        "rsd": "sample-size stability of province means",
    }
    for stage in STAGES:
        p = sub.add_parser(stage, help=helps[stage], parents=[glob])
        for dest, key, h in _STAGE_FLAGS.get(stage, []):
            p.add_argument(f"--{dest.replace('_', '-')}", dest=f"opt_{dest}", metavar=key.split(".")[-1].upper(), help=f"{h} [{key}]")
        if stage == "metrics":
            p.add_argument("action", nargs="?", default="all", choices=("all", "features", "fit"), help="what to compute (default: all)")
        if stage == "forecast":
            p.add_argument("--no-intercept", dest="opt_no_intercept", action="store_true", help="drop the intercept")
    r = sub.add_parser("run", help="run several stages in dependency order", parents=[glob])
    r.add_argument("stages", nargs="*", metavar="STAGE", help=f"subset of {', '.join(STAGES)} (default: all)")
    return parser


def _flag_layer(args: argparse.Namespace) -> dict:
    layer = {}
    for item in args.overrides:
        if "=" not in item:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        k, v = (s.strip() for s in item.split("=", 1))
        layer[k] = parse_value(k, v)
    for dest, key, _ in (x for flags in _STAGE_FLAGS.values() for x in flags):
        v = getattr(args, f"opt_{dest}", None)
        if v is not None:
            layer[key] = parse_value(key, str(v))
    if getattr(args, "opt_no_intercept", False):
        layer["forecast.intercept"] = False
    if args.seed is not None:
        layer["seed"] = args.seed
    if args.threads is not None:
        layer["threads"] = args.threads
    if args.output is not None:
        layer["output"] = str(args.output)
    return layer


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2), format="%(levelname)s %(name)s: %(message)s")
    try:
        layers = [read_config(args.config)] if args.config else []
        layers.append(_flag_layer(args))
        pipe = Pipeline(layers, threads=args.threads)
        if args.command == "metrics":
            pipe.metrics_action = args.action
        stages = (args.stages or list(STAGES)) if args.command == "run" else [args.command]
        pipe.run(stages)
    except (PipelineError, ConfigError, FileNotFoundError, ValueError) as exc:
        print(f"cdrshock: error: {exc}", file=sys.stderr)
        return 1
    for stage in (s for s in STAGES if s in stages):
        print((pipe.output / stage / "summary.txt").read_text(), end="")
    return 0


if __name__ == "__main__":
    sys.exit(main())
