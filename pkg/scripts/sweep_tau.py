"""Contrastive temperature sweep: retrieval purity and ViP success per tau.

    python3 scripts/sweep_tau.py --out runs/tau
"""

import argparse
import csv
import logging
from pathlib import Path

import numpy as np

from vip import harness


def main():
    p = argparse.ArgumentParser()
    p.add_argument("--out", default="runs/tau")
    p.add_argument("--taus", default="0.05,0.1,0.5")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")
    args = p.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(name)s: %(message)s")

    overrides = dict(item.split("=", 1) for item in args.set)
    rows = []
    for tau in (float(t) for t in args.taus.split(",")):
        out = Path(args.out) / f"tau{tau:g}"
        config = harness.load_config(None, {**overrides, "supcon.tau": str(tau), "out": str(out),
                                            "ablate": "false", "methods": "vip"})
        result = harness.run_pipeline(config)
        instructions = harness.instruction_videos(config)
        purity = [harness.retrieval_purity(config, result.data, art, instructions)[0] for art in result.seeds.values()]
        stats = result.report.summary()[("vip",)]
        rows.append({"tau": tau, "purity": float(np.mean(purity)), "vip_mean": stats["mean"], "vip_std": stats["std"]})
        print(f"tau={tau:g}  purity {rows[-1]['purity']:.3f}  ViP {stats['mean']:.1f} ({stats['std']:.1f})")

    Path(args.out).mkdir(parents=True, exist_ok=True)
    with open(Path(args.out) / "sweep_tau.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]))
        w.writeheader()
        w.writerows(rows)


if __name__ == "__main__":
    main()
