#!/usr/bin/env python3
"""Desk benchmark: staged vs pipelined wall time across worker counts.

Generates a seeded corpus (or reuses one), runs both execution modes at
each requested worker count, and prints a table.  Every run must produce
the same batch digest — the benchmark aborts loudly if any disagrees.

Example:
    python3 scripts/desk_benchmark.py --rows 50000 --workers 1,2,4
"""

import argparse
import sys
import tempfile
import time
from dataclasses import replace
from pathlib import Path

from featurebox.corpus import gen_corpus
from featurebox.pipeline import load_config, run_pipeline


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--rows", type=int, default=20_000)
    ap.add_argument("--users", type=int, default=2_000)
    ap.add_argument("--seed", type=int, default=7)
    ap.add_argument("--workers", default="1,2,4",
                    help="comma-separated worker counts")
    ap.add_argument("--corpus", default=None,
                    help="existing corpus dir (skips generation)")
    args = ap.parse_args(argv)
    worker_counts = [int(w) for w in args.workers.split(",")]

    if args.corpus:
        corpus = Path(args.corpus)
    else:
        corpus = Path(tempfile.mkdtemp(prefix="fbx-bench-"))
        t0 = time.perf_counter()
        gen_corpus(corpus, rows=args.rows, users=args.users, seed=args.seed)
        print(f"generated {args.rows}-row corpus in "
              f"{time.perf_counter() - t0:.1f}s at {corpus}")
    config = load_config(corpus / "pipeline.json")

    rows = []
    digests = set()
    for mode in ("staged", "pipelined"):
        for workers in worker_counts:
            cfg = replace(config, workers=workers)
            t0 = time.perf_counter()
            report = run_pipeline(cfg, mode=mode)
            wall = time.perf_counter() - t0
            digests.add(report.digest)
            rows.append((mode, workers, wall, report.instances,
                         report.intermediate_bytes_written, report.digest))

    print()
    print(f"{'mode':<10} {'workers':>7} {'wall_s':>8} {'instances':>10} "
          f"{'intermediate':>13}  digest")
    for mode, workers, wall, instances, inter, digest in rows:
        print(f"{mode:<10} {workers:>7} {wall:>8.2f} {instances:>10} "
              f"{inter:>13}  0x{digest:016x}")

    if len(digests) != 1:
        print("\nFATAL: runs disagree on the batch digest", file=sys.stderr)
        return 1
    print("\nall runs produced identical batches")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
