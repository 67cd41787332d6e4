#!/usr/bin/env python3
"""Sweep per-launch overhead for fused vs unfused execution.

For each overhead value, runs the pipeline once per fusion mode and
reports launch counts and the simulated overhead each mode pays.  Fusion
collapses every device layer into one launch, so the per-run saving is
(unfused_launches - fused_launches) x overhead — the table makes that
visible, and the batch digests confirm fusion never changes the output.

Example:
    python3 scripts/launch_fusion_sweep.py --rows 5000 --overheads 0.5,3.45,10
"""

import argparse
import sys
import tempfile
from dataclasses import replace
from pathlib import Path

from featurebox.corpus import gen_corpus
from featurebox.pipeline import load_config, run_pipelined


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--rows", type=int, default=5_000)
    ap.add_argument("--users", type=int, default=500)
    ap.add_argument("--seed", type=int, default=7)
    ap.add_argument("--overheads", default="0.5,3.45,10,50",
                    help="comma-separated per-launch overheads in us")
    ap.add_argument("--corpus", default=None,
                    help="existing corpus dir (skips generation)")
    args = ap.parse_args(argv)
    overheads = [float(o) for o in args.overheads.split(",")]

    if args.corpus:
        corpus = Path(args.corpus)
    else:
        corpus = Path(tempfile.mkdtemp(prefix="fbx-sweep-"))
        gen_corpus(corpus, rows=args.rows, users=args.users, seed=args.seed)
        print(f"corpus: {args.rows} rows at {corpus}")
    config = load_config(corpus / "pipeline.json")

    print()
    print(f"{'overhead_us':>11} {'fused_launches':>14} {'unfused_launches':>16} "
          f"{'fused_us':>12} {'unfused_us':>12} {'saving_us':>12}")
    digests = set()
    for overhead in overheads:
        results = {}
        for fusion in ("fused", "unfused"):
            cfg = replace(
                config, fusion=fusion, per_launch_overhead_us=overhead, workers=1
            )
            report = run_pipelined(cfg)
            results[fusion] = report
            digests.add(report.digest)
        fused, unfused = results["fused"], results["unfused"]
        print(f"{overhead:>11.2f} {fused.launches:>14} {unfused.launches:>16} "
              f"{fused.overhead_us:>12.1f} {unfused.overhead_us:>12.1f} "
              f"{unfused.overhead_us - fused.overhead_us:>12.1f}")

    if len(digests) != 1:
        print("\nFATAL: fusion or overhead changed the emitted batches",
              file=sys.stderr)
        return 1
    print(f"\nall {2 * len(overheads)} runs produced digest "
          f"0x{digests.pop():016x}")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
