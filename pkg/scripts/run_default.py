"""Run the whole default pipeline and print the success table.

    python3 scripts/run_default.py --out runs/default
"""

import argparse
import logging

from vip import harness


def main():
    p = argparse.ArgumentParser()
    p.add_argument("--out", default="runs/default")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--workers", type=int, default=1)
    args = p.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(name)s: %(message)s")

    config = harness.load_config(None, {"out": args.out, "seed": str(args.seed), "workers": str(args.workers)})
    result = harness.run_pipeline(config)
    table = result.report.summary(("method", "variant"))
    variants = list(config.variants)
    print("method".ljust(14) + "".join(f"env{v}".rjust(14) for v in variants) + "mean".rjust(10))
    means = result.report.method_means()
    for m in harness.METHODS:
        cells = "".join(f"{table[(m, v)]['mean']:6.1f} ({table[(m, v)]['std']:4.1f})".rjust(14) for v in variants)
        print(m.ljust(14) + cells + f"{means[m]:10.1f}")
    print("audit:", result.report.metadata["audit"]["flag"])
    for name, seconds in result.timings.items():
        print(f"{name:14s} {seconds:7.1f} s")


if __name__ == "__main__":
    main()
