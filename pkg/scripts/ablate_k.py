"""Re-run the k sweep on an existing run directory, optionally with another grid.

    python3 scripts/ablate_k.py --out runs/default --grid 1,0.01,0.05,1.0
"""

import argparse
from pathlib import Path

from vip import harness


def main():
    p = argparse.ArgumentParser()
    p.add_argument("--out", default="runs/default")
    p.add_argument("--grid", help="comma-separated k values; integers are counts, decimals fractions")
    args = p.parse_args()

    config_file = Path(args.out) / "config.txt"
    overrides = {"out": args.out}
    if args.grid:
        overrides["k_grid"] = args.grid
    config = harness.load_config(config_file if config_file.exists() else None, overrides)
    data = harness.read_data(config.out)
    seeds = {i: harness.load_seed(config, config.out, i) for i in range(len(config.training_seeds))}
    rows = harness.ablate_k(config, data, seeds)
    harness.write_ablation_csv(rows, Path(config.out) / "ablate_k.csv")
    best = max(r["mean"] for r in rows)
    for r in rows:
        mark = "  <- best" if r["mean"] == best else ""
        print(f"k={r['k']!s:6s} resolved {r['resolved_k']:4d}   {r['mean']:5.1f} ({r['std']:.1f}){mark}")


if __name__ == "__main__":
    main()
