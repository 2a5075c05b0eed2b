"""``promptsync`` command line."""
from __future__ import annotations

import argparse
import sys
from dataclasses import replace
from pathlib import Path

from .bench import runner
from .bench.config import BenchConfig, load_config
from .errors import ConfigError, PromptSyncError
from .losses import VARIANTS

COMMANDS = ("build-cache", "run", "ablate", "sweep-views", "sweep-steps", "save-prompts", "report")


def _u64(text: str) -> int:
    value = int(text, 0)
    if not 0 <= value < 2**64:
        raise argparse.ArgumentTypeError("seed must be an unsigned 64-bit integer")
    return value


def _positive(text: str) -> int:
    value = int(text)
    if value < 1:
        raise argparse.ArgumentTypeError("must be a positive integer")
    return value


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="promptsync", description="Test-time prompt tuning benchmark.")
    sub = parser.add_subparsers(dest="command", required=True)
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="YAML benchmark config (defaults when omitted)")
    common.add_argument("--seed", type=_u64, action="append", help="restrict to this seed (repeatable)")
    common.add_argument("--out", type=Path, help="output directory")
    common.add_argument("--mode", choices=("full", "star"), help="run only this one of full/star")
    common.add_argument("--variant", choices=VARIANTS, action="append", help="alignment-loss variant")
    common.add_argument("--views", type=_positive, help="test-time augmented views per sample")
    common.add_argument("--steps", type=_positive, help="gradient accumulation iterations n")
    helps = {"build-cache": "calibrate source models and write per-seed caches",
             "run": "evaluate the configured methods",
             "ablate": "compare alignment-loss variants",
             "sweep-views": "full method over view counts",
             "sweep-steps": "full method over accumulation iterations",
             "save-prompts": "recompute and save the meta-train prompts",
             "report": "print the tables of saved reports"}
    for name in COMMANDS:
        sub.add_parser(name, parents=[common], help=helps[name])
    return parser


def _configure(args) -> BenchConfig:
    cfg = load_config(args.config)
    a = cfg.adaptation
    if args.views is not None and args.command != "sweep-views":
        a = replace(a, views=replace(a.views, n_views=args.views))
    if args.steps is not None and args.command != "sweep-steps":
        a = replace(a, n=args.steps)
    if args.variant and args.command != "ablate":
        if len(args.variant) > 1:
            raise ConfigError("--variant may be given once outside 'ablate'")
        a = replace(a, loss=replace(a.loss, variant=args.variant[0]))
    kw = {"adaptation": a}
    if args.seed:
        kw["seeds"] = tuple(args.seed)
        kw["sweep_seeds"] = tuple(args.seed)
    if args.mode:
        other = "star" if args.mode == "full" else "full"
        methods = [m for m in cfg.methods if m != other]
        kw["methods"] = tuple(methods if args.mode in methods else methods + [args.mode])
    if args.command == "build-cache" and args.out is not None:
        kw["cache_dir"] = str(args.out)
    return replace(cfg, **kw)


def _log(message: str) -> None:
    print(message, file=sys.stderr, flush=True)


def _emit(report, out: Path | None) -> None:
    paths = report.write(out or Path("runs/report"))
    print(report.table())
    for key in ("results", "table", "timing"):
        print(f"{key}: {paths[key]}")


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "report":
            return _report(args.out or Path("runs/report"))
        cfg = _configure(args)
        if args.command == "build-cache":
            runner.build_cache(cfg, log=_log)
        elif args.command == "run":
            _emit(runner.run_benchmark(cfg, log=_log), args.out)
        elif args.command == "ablate":
            _emit(runner.run_ablation(cfg, args.variant, log=_log), args.out)
        elif args.command == "sweep-views":
            _emit(runner.sweep_views(cfg, [args.views] if args.views else None, log=_log), args.out)
        elif args.command == "sweep-steps":
            _emit(runner.sweep_steps(cfg, [args.steps] if args.steps else None, log=_log), args.out)
        elif args.command == "save-prompts":
            for seed in cfg.seeds:
                out = None
                if args.out is not None:
                    args.out.mkdir(parents=True, exist_ok=True)
                    out = args.out / f"p_hat_seed{seed}.pspt"
                print(runner.save_p_hat(cfg, seed, out))
    except PromptSyncError as exc:
        print(f"promptsync: error: {exc}", file=sys.stderr)
        return 2
    return 0


def _report(out: Path) -> int:
    files = sorted(p for p in out.glob("*.json") if not p.name.endswith(".timing.json"))
    if not files:
        print(f"promptsync: error: no reports in {out}", file=sys.stderr)
        return 2
    for path in files:
        report = runner.BenchReport.read(path)
        print(f"== {report.kind} (config {report.config_hash[:12]}, build {report.build_id}, "
              f"seeds {report.seeds})")
        print(report.table())
        if report.checks:
            print("checks:", ", ".join(f"{k}={v}" for k, v in report.checks.items()))
        print()
    return 0


if __name__ == "__main__":
    sys.exit(main())
