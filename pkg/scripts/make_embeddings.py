#!/usr/bin/env python3
"""Write a synthetic contextual-embedding file covering one or more corpora."""

import argparse

from dstreader.synth import write_synthetic_embeddings


def main() -> int:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--corpus", action="append", required=True,
                        help="corpus JSON file; repeatable")
    parser.add_argument("--schema", required=True)
    parser.add_argument("--out", required=True)
    parser.add_argument("--dim", type=int, default=48)
    args = parser.parse_args()
    n = write_synthetic_embeddings(args.out, args.corpus, args.schema, dim=args.dim)
    print(f"wrote {n} records to {args.out}")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
