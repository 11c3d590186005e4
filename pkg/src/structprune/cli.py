"""Command-line entry point: ``structprune <command> [options]``."""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from .checkpoint import load_checkpoint, save_checkpoint
from .config import RunConfig, load_config
from .driver import (RunReport, latest_checkpoint, load_data, phase_two, rates, run_autocompress,
                     scratch_comparison, train_baseline)
from .errors import ConfigError, FormatError, InfeasibleError, TrainingError
from .purification import shrink_network
from .schemes import count_flops, count_params
from .training import evaluate_accuracy


def _config(args):
    cfg = load_config(args.config) if args.config else RunConfig()
    changes = {}
    if args.seed is not None:
        changes["seed"] = args.seed
    if getattr(args, "objective", None):
        changes["objective"] = args.objective
    if getattr(args, "rounds", None) is not None:
        changes["rounds"] = args.rounds
    if getattr(args, "acc_floor", None) is not None:
        changes["acc_floor"] = args.acc_floor
    if getattr(args, "purify_per_round", False):
        changes["purify_per_round"] = True
    if getattr(args, "output", None):
        changes["output_dir"] = args.output
    return cfg.replace(**changes)


def _checkpoint_path(args, cfg, default):
    if args.checkpoint:
        return Path(args.checkpoint)
    return Path(cfg.output_dir) / default


def cmd_train(args):
    cfg = _config(args)
    data = load_data(cfg)
    net, acc = train_baseline(cfg, data)
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    path = out / "baseline.acmp"
    save_checkpoint(net, None, {"stage": "trained", "accuracy": repr(acc), "seed": cfg.seed}, path)
    print(f"baseline accuracy {acc:.4f}; saved {path}")
    return 0


def cmd_compress(args):
    cfg = _config(args)
    result = run_autocompress(cfg, resume=args.resume)
    print(result.report.summary())
    print(f"report: {result.output_dir / 'report.csv'}")
    return 2 if result.report.aborted else 0


def cmd_purify(args):
    cfg = _config(args)
    path = latest_checkpoint(args.checkpoint or cfg.output_dir)
    ck = load_checkpoint(path)
    data = load_data(cfg)
    before = evaluate_accuracy(ck.network, data[2])
    masked, search = phase_two(ck.network, cfg, data, "cli")
    final = shrink_network(masked)
    after = evaluate_accuracy(final, data[2])
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    save_checkpoint(final, None, {"stage": "purified", "source": str(path)}, out / "purified.acmp")
    print(f"purified {path}: conv params {count_params(ck.network).conv} -> {count_params(final).conv}, "
          f"accuracy {before:.4f} -> {after:.4f}")
    return 0


def cmd_eval(args):
    cfg = _config(args)
    ck = load_checkpoint(_checkpoint_path(args, cfg, "final.acmp"))
    data = load_data(cfg)
    acc = evaluate_accuracy(ck.network, data[2])
    p, f = count_params(ck.network), count_flops(ck.network)
    print(f"accuracy {acc:.4f}  conv params {p.conv}  conv flops {f.conv}")
    if "report" in ck.metadata:
        report = RunReport.from_json(ck.metadata["report"])
        pr, fr = rates(ck.network, report)
        print(f"rates vs dense baseline: params {pr:.2f}x  flops {fr:.2f}x")
    return 0


def cmd_scratch(args):
    cfg = _config(args)
    path = _checkpoint_path(args, cfg, "final.acmp")
    ck = load_checkpoint(path)
    data = load_data(cfg)
    pruned = evaluate_accuracy(ck.network, data[2])
    report = RunReport.from_json(ck.metadata["report"]) if "report" in ck.metadata else None
    result = scratch_comparison(ck.network, pruned, data, cfg, report)
    print(f"pruned {result['pruned_accuracy']:.4f}  from scratch {result['scratch_accuracy']:.4f}  "
          f"gap {result['gap']:+.4f}")
    if report is not None:
        out = Path(cfg.output_dir)
        (out / "report.csv").write_text(report.to_csv())
        (out / "summary.txt").write_text(report.summary() + "\n")
    return 0


def cmd_report(args):
    cfg = _config(args)
    path = Path(args.checkpoint) if args.checkpoint else Path(cfg.output_dir) / "final.acmp"
    if not path.exists():
        path = latest_checkpoint(cfg.output_dir)
    ck = load_checkpoint(path)
    if "report" not in ck.metadata:
        raise ConfigError(f"{path} carries no run report")
    report = RunReport.from_json(ck.metadata["report"])
    print(report.to_csv() if args.csv else report.summary(), end="" if args.csv else "\n")
    return 0


def build_parser():
    parser = argparse.ArgumentParser(prog="structprune", description="Structured pruning with ADMM and annealing search")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="flat key = value config file")
        p.add_argument("--seed", type=int)
        p.add_argument("--output", help="run directory (overrides output_dir)")
        return p

    common(sub.add_parser("train", help="train the baseline network")).set_defaults(func=cmd_train)
    p = common(sub.add_parser("compress", help="progressive rounds then purification"))
    p.add_argument("--objective", choices=("params", "flops"))
    p.add_argument("--rounds", type=int)
    p.add_argument("--acc-floor", type=float)
    p.add_argument("--resume", help="checkpoint or run directory to continue from")
    p.add_argument("--purify-per-round", action="store_true")
    p.set_defaults(func=cmd_compress)
    for name, func, text in (("purify", cmd_purify, "purification only"), ("eval", cmd_eval, "evaluate a checkpoint"),
                             ("scratch", cmd_scratch, "train a pruned structure from scratch"),
                             ("report", cmd_report, "print a run report")):
        p = common(sub.add_parser(name, help=text))
        p.add_argument("--checkpoint")
        if name == "report":
            p.add_argument("--csv", action="store_true", help="print the CSV instead of the summary")
        p.set_defaults(func=func)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (ConfigError, FormatError, InfeasibleError, TrainingError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
