"""Command-line front end.

Exit codes: 0 on success, 1 on runtime failures (bad input data, stage
errors, failed verification), 2 on usage or configuration errors.
"""

from __future__ import annotations

import argparse
import sys
import time
from dataclasses import replace
from pathlib import Path

from .device import DEFAULT_LAUNCH_OVERHEAD_US, calibrate_launch_overhead
from .corpus import gen_corpus
from .mempool import create_pool, stress_group_allocations
from .opgraph import plan_report
from .pipeline import ConfigError, load_config, prepare, run_pipeline

_DEFAULT_COUNTS = (1, 10, 100, 1000, 10000)


def _fail(message: str, code: int) -> int:
    print(f"error: {message}", file=sys.stderr)
    return code


def _write_report(args, text: str) -> None:
    print(text)
    if getattr(args, "report", None):
        Path(args.report).write_text(text + "\n", encoding="utf-8")


def cmd_run(args) -> int:
    try:
        config = load_config(args.config)
        overrides = {}
        if args.mode:
            overrides["mode"] = args.mode
        if args.workers is not None:
            overrides["workers"] = args.workers
        if args.batch_size is not None:
            overrides["batch_size"] = args.batch_size
        if args.staging:
            overrides["staging_dir"] = Path(args.staging)
        if overrides:
            config = replace(config, **overrides)
        report = run_pipeline(config)
    except ConfigError as exc:
        return _fail(str(exc), 2)
    except Exception as exc:  # data or stage failure: runtime, not usage
        return _fail(str(exc), 1)
    _write_report(args, report.to_text())
    return 0


def cmd_plan(args) -> int:
    try:
        config = load_config(args.config)
        prepared = prepare(config)
        text = plan_report(
            prepared.plan, prepared.dag, config.per_launch_overhead_us
        )
    except ConfigError as exc:
        return _fail(str(exc), 2)
    except Exception as exc:
        return _fail(str(exc), 1)
    _write_report(args, text)
    return 0


def _parse_points(text: str) -> list[tuple[int, float]]:
    points = []
    for part in text.split(","):
        count, sep, micros = part.partition(":")
        if not sep:
            raise ValueError(f"bad point {part!r}, expected count:us")
        points.append((int(count), float(micros)))
    return points


def _measure_dispatch(counts, repeat: int) -> list[tuple[int, float]]:
    """Time this host's own no-op dispatch loop at several batch counts."""

    def kernel():
        pass

    points = []
    for count in counts:
        best = float("inf")
        for _ in range(repeat):
            t0 = time.perf_counter()
            for _ in range(count):
                kernel()
            best = min(best, (time.perf_counter() - t0) * 1e6)
        points.append((count, best))
    return points


def cmd_bench_launch(args) -> int:
    try:
        if args.points:
            points = _parse_points(args.points)
            source = "table"
        else:
            counts = [int(c) for c in args.counts.split(",")]
            points = _measure_dispatch(counts, args.repeat)
            source = "measured"
        model = calibrate_launch_overhead(points)
    except (ValueError, TypeError) as exc:
        return _fail(str(exc), 2)
    fitted = model.per_launch_overhead_us
    default = DEFAULT_LAUNCH_OVERHEAD_US
    rel = abs(fitted - default) / default
    lines = ["launch overhead calibration"]
    lines += [f"  {c} launches -> {us:.3f} us" for c, us in points]
    lines.append(f"fitted per-launch overhead: {fitted:.4f} us ({source})")
    lines.append(
        f"reference model: {default:.2f} us (relative error {rel * 100:.2f}%)"
    )
    lines.append("")
    lines.append("[report]")
    lines.append(f"per_launch_us={fitted:.6f}")
    lines.append(f"default_us={default:.6f}")
    lines.append(f"relative_error={rel:.6f}")
    lines.append(f"source={source}")
    _write_report(args, "\n".join(lines))
    return 0


def _overlaps(grants) -> int:
    """Count overlapping live lane spans across all grants."""
    spans = []
    for offsets, sizes in grants:
        spans.extend(
            (off, off + size) for off, size in zip(offsets, sizes) if size > 0
        )
    spans.sort()
    bad = 0
    for i in range(1, len(spans)):
        if spans[i][0] < spans[i - 1][1]:
            bad += 1
    return bad


def cmd_bench_alloc(args) -> int:
    try:
        pool = create_pool(args.pool_bytes)
        result = stress_group_allocations(
            pool,
            groups=args.groups,
            lanes=args.lanes,
            max_size=args.max_size,
            threads=args.threads,
            seed=args.seed,
        )
    except (ValueError, MemoryError) as exc:
        return _fail(str(exc), 2)
    overlaps = _overlaps(result.grants)
    ok = (
        not result.failures
        and overlaps == 0
        and result.head_after == result.expected_head
    )
    rate = result.groups / result.elapsed_s if result.elapsed_s > 0 else 0.0
    lines = [
        "group allocation stress",
        f"  {result.groups} groups x {result.lanes} lanes "
        f"on {args.threads} thread(s)",
        f"  head after run: {result.head_after} "
        f"(expected {result.expected_head})",
        f"  head advances: {result.head_advances}",
        f"  overlapping lane spans: {overlaps}",
        f"  data verification failures: {len(result.failures)}",
        f"  {result.elapsed_s:.4f} s ({rate:.0f} groups/s)",
        f"verified: {'yes' if ok else 'NO'}",
        "",
        "[report]",
        f"groups={result.groups}",
        f"lanes={result.lanes}",
        f"threads={args.threads}",
        f"head_after={result.head_after}",
        f"expected_head={result.expected_head}",
        f"head_advances={result.head_advances}",
        f"overlaps={overlaps}",
        f"failures={len(result.failures)}",
        f"elapsed_s={result.elapsed_s:.6f}",
        f"verified={'yes' if ok else 'no'}",
    ]
    _write_report(args, "\n".join(lines))
    return 0 if ok else 1


def cmd_gen_corpus(args) -> int:
    if args.instances < 0 or args.users < 1 or args.batch_size < 1:
        return _fail("instances must be >= 0; users and batch-size >= 1", 2)
    try:
        paths = gen_corpus(
            args.out,
            rows=args.instances,
            users=args.users,
            seed=args.seed,
            batch_size=args.batch_size,
            views=args.views,
        )
    except ValueError as exc:
        return _fail(str(exc), 2)
    except OSError as exc:
        return _fail(str(exc), 1)
    for name in sorted(paths):
        print(f"{name}: {paths[name]}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="featurebox",
        description="Feature-extraction pipeline: run, plan, and benchmark.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="run a pipeline config end to end")
    p.add_argument("--config", required=True, help="JSON pipeline config path")
    p.add_argument("--mode", choices=("pipelined", "staged"))
    p.add_argument("--workers", type=int, help="host worker thread cap")
    p.add_argument("--batch-size", type=int, dest="batch_size")
    p.add_argument("--staging", help="directory for staged mode files")
    p.add_argument("--report", help="also write the report to this file")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("plan", help="print the layer plan and launch costs")
    p.add_argument("--config", required=True, help="JSON pipeline config path")
    p.add_argument("--report", help="also write the plan to this file")
    p.set_defaults(func=cmd_plan)

    p = sub.add_parser(
        "bench-launch", help="fit the per-launch overhead cost model"
    )
    p.add_argument(
        "--points",
        help="fit these count:us pairs instead of measuring, e.g. 1:4,10:35",
    )
    p.add_argument(
        "--counts",
        default=",".join(str(c) for c in _DEFAULT_COUNTS),
        help="launch counts to measure (comma separated)",
    )
    p.add_argument("--repeat", type=int, default=5)
    p.add_argument("--report", help="also write the result to this file")
    p.set_defaults(func=cmd_bench_launch)

    p = sub.add_parser(
        "bench-alloc", help="stress the arena pool with concurrent groups"
    )
    p.add_argument("--pool-bytes", type=int, default=8 << 20, dest="pool_bytes")
    p.add_argument("--groups", type=int, default=2000)
    p.add_argument("--lanes", type=int, default=64)
    p.add_argument("--max-size", type=int, default=256, dest="max_size")
    p.add_argument("--threads", type=int, default=8)
    p.add_argument("--seed", type=int, default=1)
    p.add_argument("--report", help="also write the result to this file")
    p.set_defaults(func=cmd_bench_alloc)

    p = sub.add_parser("gen-corpus", help="generate the synthetic corpus")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--instances", type=int, default=20_000)
    p.add_argument("--views", type=int, choices=(1, 2), default=2)
    p.add_argument("--users", type=int, default=2_000)
    p.add_argument("--seed", type=int, default=7)
    p.add_argument("--batch-size", type=int, default=512, dest="batch_size")
    p.set_defaults(func=cmd_gen_corpus)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
