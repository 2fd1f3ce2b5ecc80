#!/usr/bin/env python3
"""Regenerate the bundled synthetic dataset under data/synthetic/."""

import argparse
from pathlib import Path

from dstreader.synth import write_synthetic_dataset


def main() -> int:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--out", default=Path(__file__).resolve().parents[1] / "data" / "synthetic")
    parser.add_argument("--seed", type=int, default=20240811)
    parser.add_argument("--train", type=int, default=50)
    parser.add_argument("--dev", type=int, default=20)
    parser.add_argument("--test", type=int, default=20)
    args = parser.parse_args()
    paths = write_synthetic_dataset(
        args.out, seed=args.seed, n_train=args.train, n_dev=args.dev, n_test=args.test
    )
    for name, path in paths.items():
        print(f"{name}: {path}")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
