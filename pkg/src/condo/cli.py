"""Command line entry point: ``gen``, ``run``, ``sweep`` and ``report``.

Exit codes: 0 on success, 2 for configuration errors, 3 for runtime failures.
"""
from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import replace
from pathlib import Path

from .errors import ConfigError, InfeasibleSplit, InvalidParams
from .harness import SWEEP_DEFAULTS, emit_report, load_config, run_experiment, teacher_sweep
from .world import build_benchmark, save_benchmark

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 2, 3

log = logging.getLogger("condo")


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="condo", description="Continual pose-regression experiments on synthetic scenes.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen", help="build a benchmark and write it as JSON")
    g.add_argument("--config", required=True)
    g.add_argument("--out", required=True)

    r = sub.add_parser("run", help="run every configured strategy")
    r.add_argument("--config", required=True)
    r.add_argument("--out", required=True)
    r.add_argument("--seed", type=int)
    r.add_argument("--parallel", type=int)

    s = sub.add_parser("sweep", help="run a budget, buffer or teacher sweep")
    s.add_argument("--axis", required=True, choices=sorted(SWEEP_DEFAULTS))
    s.add_argument("--config", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--seed", type=int)
    s.add_argument("--parallel", type=int)

    rep = sub.add_parser("report", help="summarize run artifacts")
    rep.add_argument("--run", required=True)
    rep.add_argument("--format", choices=("csv", "json"), default="csv")
    return p


def _overrides(cfg, args):
    if getattr(args, "seed", None) is not None:
        cfg = replace(cfg, seed=args.seed)
    if getattr(args, "parallel", None) is not None:
        if args.parallel < 1:
            raise ConfigError("--parallel must be >= 1")
        cfg = replace(cfg, parallel=args.parallel)
    return cfg


def _dispatch(args) -> None:
    if args.command == "report":
        for path in emit_report(args.run, args.format):
            print(path)
        return
    cfg = _overrides(load_config(args.config), args)
    out = Path(args.out)
    try:
        benchmark = build_benchmark(cfg.benchmark)
    except (InvalidParams, InfeasibleSplit) as exc:
        raise ConfigError(f"benchmark: {exc}") from exc
    out.mkdir(parents=True, exist_ok=True)
    if args.command == "gen":
        save_benchmark(benchmark, out / "benchmark.json")
        print(out / "benchmark.json")
    elif args.command == "run":
        arts = run_experiment(cfg, out, benchmark)
        for label, art in arts.items():
            inf = art.final.group("inference")
            print(f"{label}: inference median {inf.median_pos_m:.4f} m / {inf.median_rot_deg:.3f} deg")
    else:
        values = cfg.sweep_values if cfg.sweep_axis == args.axis and cfg.sweep_values else SWEEP_DEFAULTS[args.axis]
        cfg = replace(cfg, sweep_axis=args.axis, sweep_values=list(values))
        if args.axis == "teacher":
            for row in teacher_sweep(cfg, out, benchmark):
                print(f"{row['run_label']}: inference median {row['inference_median_pos_m']:.4f} m, "
                      f"teacher median {row['teacher_median_pos_m']:.4f} m")
        else:
            for label, art in run_experiment(cfg, out, benchmark).items():
                print(f"{label}: inference median {art.final.group('inference').median_pos_m:.4f} m")


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        _dispatch(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as exc:  # any failure inside a run is reported, not raised
        log.debug("run failed", exc_info=True)
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK
