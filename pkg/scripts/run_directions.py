"""Run the directional synthetic experiments and write per-seed CSVs.

    python scripts/run_directions.py --out runs/directions [--only querypos_vs_none ...]
"""

import argparse
import logging
from pathlib import Path

from lensctr import experiments


def main() -> None:
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--out", default="runs/directions")
    p.add_argument("--only", nargs="*", default=None, help="direction names to run")
    p.add_argument("--seeds", default="42,123,456")
    args = p.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")
    seeds = tuple(int(s) for s in args.seeds.split(","))
    for direction in experiments.all_directions(seeds):
        if args.only and direction.name not in args.only:
            continue
        result = experiments.run_direction(direction, Path(args.out) / direction.name)
        print(("PASS " if result.passed else "FAIL ") + result.line(), flush=True)


if __name__ == "__main__":
    main()
