"""Window-length and layer-count sensitivity, one CSV per axis.

    python3 scripts/run_sweep.py configs/planted.json --axis window layers --seeds 3
"""
import argparse
from pathlib import Path

from mdgnn.experiment import load_config, rows_to_csv, run_sweep


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("config")
    p.add_argument("--axis", nargs="+", choices=("window", "layers"), default=["window", "layers"])
    p.add_argument("--seeds", type=int, default=5)
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")
    p.add_argument("--out", default="runs/sweep")
    args = p.parse_args()

    cfg = load_config(args.config, args.set)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for axis in args.axis:
        text = rows_to_csv(run_sweep(cfg, axis, range(args.seeds)), ("axis", "value"))
        (out / f"sweep_{axis}.csv").write_text(text)
        print(text)


if __name__ == "__main__":
    main()
