"""Command-line entry point: ``execlab {train,evaluate,benchmark,export-policy,reproduce}``."""

from __future__ import annotations

import argparse
import dataclasses
import logging
import sys
from pathlib import Path

from . import ddql, harness
from .ddql import FeatureMode


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, help="flat key = value config file")
    p.add_argument("--scenario", choices=harness.SCENARIO_NAMES, help="override the config scenario")
    p.add_argument("--mode", choices=["QT", "QTS"], help="override the feature set")
    p.add_argument("--seed", type=int, help="override the config seed")
    p.add_argument("--out", type=Path, help="output directory")
    p.add_argument("--profile", choices=sorted(harness.PROFILES), help="episode budget profile")


def _config(args) -> harness.ExperimentConfig:
    cfg = harness.load_config(args.config) if args.config else harness.ExperimentConfig()
    changes = {}
    if args.scenario:
        changes["scenario"] = args.scenario
    if args.mode:
        changes["mode"] = FeatureMode(args.mode)
    if args.seed is not None:
        changes["seed"] = args.seed
    if args.out:
        changes["out"] = args.out
    if args.profile:
        changes["profile"] = args.profile
    return dataclasses.replace(cfg, **changes) if changes else cfg


def _out(cfg) -> Path:
    out = Path(cfg.out) if cfg.out else Path("runs") / f"{cfg.scenario}_{cfg.mode.value}_seed{cfg.seed}"
    out.mkdir(parents=True, exist_ok=True)
    return out


def cmd_train(args) -> int:
    cfg = _config(args)
    out = _out(cfg)
    train_scn, _ = cfg.scenarios()
    tcfg = cfg.train_config()
    policy, tlog = ddql.train(tcfg, train_scn, progress_every=max(1, tcfg.episodes // 20))
    ddql.save_policy(policy, out / "policy.bin")
    harness.write_training_log(out / "training_log.csv", tlog)
    print(f"trained {tcfg.episodes} episodes in {tlog.seconds:.1f}s -> {out / 'policy.bin'}")
    return 0


def cmd_evaluate(args) -> int:
    cfg = _config(args)
    out = _out(cfg)
    policy = ddql.load_policy(args.checkpoint)
    if policy.mode is not cfg.mode:
        cfg = dataclasses.replace(cfg, mode=policy.mode)
    report = harness.evaluate_with_benchmarks(policy, cfg)
    harness.check_report(report)
    harness.write_report(out, report)
    for k, v in report.summary().items():
        print(f"{k:>28s} {v:.6g}")
    return 0


def cmd_benchmark(args) -> int:
    cfg = _config(args)
    out = _out(cfg)
    strategies = harness.benchmark_strategies(cfg)
    if args.strategy not in strategies:
        print(f"strategy must be one of {sorted(strategies)}", file=sys.stderr)
        return 2
    _, test = cfg.scenarios()
    res = harness.run_benchmark(strategies[args.strategy], test, cfg.train_config().test_episodes, cfg.seed)
    path = out / f"benchmark_{args.strategy}.csv"
    harness.write_csv(path, ["episode", "is", "cash"], zip(range(len(res.cash)), res.shortfall, res.cash), "benchmark")
    print(f"{args.strategy}: mean IS {res.shortfall.mean():.6f} over {len(res.cash)} episodes -> {path}")
    return 0


def cmd_export_policy(args) -> int:
    policy = ddql.load_policy(args.checkpoint)
    out = args.out or Path(args.checkpoint).parent
    rows = ddql.policy_heatmap(policy)
    cols = ["t", "q", "action"] if policy.mode is FeatureMode.QT else ["t", "q", "price_level", "action"]
    path = Path(out) / "heatmap.csv"
    harness.write_csv(path, cols, rows, "heatmap")
    print(f"wrote {len(rows)} rows -> {path}")
    return 0


def cmd_reproduce(args) -> int:
    base = harness.load_config(args.config) if args.config else None
    rows = harness.reproduce(args.table, seed=args.seed or 0, profile=args.profile or "full",
                             out=args.out or Path("runs") / args.table, base=base)
    for r in rows:
        print(r)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="execlab", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a DDQL agent and write a policy checkpoint")
    _common(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="evaluate a checkpoint against paired benchmarks")
    _common(p)
    p.add_argument("--checkpoint", type=Path, required=True)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("benchmark", help="simulate a benchmark strategy and write its IS per episode")
    _common(p)
    p.add_argument("--strategy", default="twap", help="twap or theoretical")
    p.set_defaults(func=cmd_benchmark)

    p = sub.add_parser("export-policy", help="write the greedy-action heatmap of a checkpoint")
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--out", type=Path)
    p.set_defaults(func=cmd_export_policy)

    p = sub.add_parser("reproduce", help="run every experiment behind one results table")
    p.add_argument("table", choices=sorted(harness.TABLES))
    _common(p)
    p.set_defaults(func=cmd_reproduce)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except harness.InvariantViolation as exc:
        print(f"invariant violated: {exc}", file=sys.stderr)
        return 3
    except (ValueError, ddql.TrainingAborted) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
