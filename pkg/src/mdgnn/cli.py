"""Command-line entry point: generate, train, backtest, ablate, sweep, check."""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

from . import graph as gm
from .autodiff import NumericError
from .experiment import (ExperimentConfig, fusion_csv, fusion_weights, load_config, load_dataset,
                         prepare, rows_to_csv, rows_to_markdown, run_ablation, run_backtest,
                         run_sweep, schedule_for, write_report)
from .graph import DataError
from .model import init_params
from .synthetic import ConfigError, preset, simulate
from .train import LeakageError, save_checkpoint, train

log = logging.getLogger("mdgnn")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4


def _out(args, default: str) -> Path:
    out = Path(args.out or default)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _seeds(args, cfg: ExperimentConfig) -> list[int]:
    return [cfg.seed + i for i in range(args.n_seeds)]


def cmd_generate(args, cfg: ExperimentConfig) -> int:
    if cfg.data.path:
        raise ConfigError("generate needs a preset, not data.path")
    market = preset(cfg.data.preset, **{"seed": cfg.seed, **cfg.data.overrides})
    market.check()
    g, _ = simulate(market)
    out = _out(args, "data")
    gm.save(g, out)
    s = g.snapshots[0]
    print(f"nodes S={s.count('S')} B={s.count('B')} I={s.count('I')} days={g.n_days}")
    totals = {r: sum(snap.edge_counts()[r] for snap in g.snapshots) for r in gm.RELATIONS}
    for rel in gm.RELATIONS:
        print(f"{rel}: day0={s.edge_counts()[rel]} total={totals[rel]}")
    digest = hashlib.sha256()
    for name in ("snapshots.jsonl", "prices.csv", "benchmark.csv"):
        digest.update((out / name).read_bytes())
    print(f"sha256 {digest.hexdigest()}")
    return EXIT_OK


def cmd_train(args, cfg: ExperimentConfig) -> int:
    """Train one fold of the schedule and write its checkpoint."""
    g = load_dataset(cfg)
    data = prepare(cfg, g)
    folds = schedule_for(cfg, data.n_label_days)
    if not 0 <= args.fold < len(folds):
        raise ConfigError(f"fold {args.fold} out of range; schedule has {len(folds)}")
    fold = folds[args.fold]
    result = train(data, fold.days("train"), fold.days("val"), replace(cfg.train, seed=cfg.seed),
                   init_params(data.cfg, cfg.seed))
    out = _out(args, "runs/train")
    save_checkpoint(out / "model", result.params, cfg.to_dict(), result.best_epoch,
                    result.best_val_ic)
    with open(out / "curve.csv", "w") as fh:
        fh.write("epoch,loss,val_ic\n")
        for row in result.curve:
            fh.write(f"{row['epoch']},{row['loss']!r},{row['val_ic']!r}\n")
    if args.fusion:
        rows = fusion_weights(result.params, data, fold.days("test"))
        (out / "fusion.csv").write_text(fusion_csv(rows))
    print(f"best epoch {result.best_epoch} val IC {result.best_val_ic:.4f}")
    return EXIT_NUMERIC if result.diverged else EXIT_OK


def cmd_backtest(args, cfg: ExperimentConfig) -> int:
    out = Path(args.out or "runs/backtest")  # created on first write
    report = run_backtest(cfg, checkpoint_dir=out / "checkpoints")
    write_report(report, out)
    print(json.dumps({"config_hash": report["config_hash"], **report["aggregates"]}, indent=2))
    return EXIT_NUMERIC if any(f["diverged"] for f in report["folds"]) else EXIT_OK


def cmd_ablate(args, cfg: ExperimentConfig) -> int:
    rows = run_ablation(cfg, _seeds(args, cfg))
    out = _out(args, "runs/ablate")
    (out / "ablation.csv").write_text(rows_to_csv(rows, ("table", "variant")))
    md = "## Components\n\n" + rows_to_markdown(rows, "components")
    md += "\n## Relations\n\n" + rows_to_markdown(rows, "relations")
    (out / "ablation.md").write_text(md)
    print(md)
    return EXIT_OK


def cmd_sweep(args, cfg: ExperimentConfig) -> int:
    rows = run_sweep(cfg, args.axis, _seeds(args, cfg))
    out = _out(args, "runs/sweep")
    text = rows_to_csv(rows, ("axis", "value"))
    (out / f"sweep_{args.axis}.csv").write_text(text)
    print(text, end="")
    return EXIT_OK


def cmd_check(args, cfg: ExperimentConfig) -> int:
    """Run the invariant suites (the tests directory) through pytest."""
    import pytest
    tests = Path(args.tests) if args.tests else Path(__file__).resolve().parents[2] / "tests"
    if not tests.exists():
        raise ConfigError(f"test directory {tests} not found")
    code = pytest.main([str(tests), "-q", "-m", args.marker] if args.marker else [str(tests), "-q"])
    return EXIT_OK if code == 0 else EXIT_NUMERIC


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON experiment config")
    common.add_argument("--seed", type=int, help="top-level seed (overrides the config)")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override one config key, e.g. model.d_h=16 (repeatable)")
    common.add_argument("--out", help="output directory")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="mdgnn", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("generate", parents=[common], help="write a synthetic dataset")
    t = sub.add_parser("train", parents=[common], help="train one fold and save a checkpoint")
    t.add_argument("--fold", type=int, default=0)
    t.add_argument("--fusion", action="store_true", help="also export fusion weights on test days")
    sub.add_parser("backtest", parents=[common], help="rolling train/test backtest")
    a = sub.add_parser("ablate", parents=[common], help="component and relation ablations")
    a.add_argument("--n-seeds", type=int, default=5)
    s = sub.add_parser("sweep", parents=[common], help="window or layer sensitivity")
    s.add_argument("--axis", choices=("window", "layers"), required=True)
    s.add_argument("--n-seeds", type=int, default=5)
    c = sub.add_parser("check", parents=[common], help="run the invariant test suites")
    c.add_argument("--tests", help="test directory (defaults to the repository's tests/)")
    c.add_argument("--marker", help="pytest -m expression, e.g. 'not slow'")
    return p


COMMANDS = {"generate": cmd_generate, "train": cmd_train, "backtest": cmd_backtest,
            "ablate": cmd_ablate, "sweep": cmd_sweep, "check": cmd_check}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config, args.set, args.seed)
        return COMMANDS[args.command](args, cfg)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, LeakageError, OSError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (NumericError, FloatingPointError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
