"""End-to-end acceptance checks.

Each test verifies one headline guarantee of the engine and prints a
single verdict line (even under captured output) so a full run reads as a
checklist.  The checks recompute every expected value independently —
least-squares fits, longest paths, nested-loop joins — rather than
trusting the module under test.
"""

import random
import time
from dataclasses import replace

import pytest

from featurebox.columnstore import ColumnBatch, Kind, open_view, read_columns, write_view
from featurebox.corpus import gen_corpus
from featurebox.device import calibrate_launch_overhead
from featurebox.featureops import COMPUTE_BOUND, FunctionRef, OperatorSpec
from featurebox.mempool import create_pool, round_up_group, stress_group_allocations
from featurebox.opgraph import (
    BODY,
    Node,
    OperatorDag,
    PlacementBudget,
    expand_call_graph,
    fused_launch_count,
    layer_schedule,
    place_operators,
    unfused_launch_count,
)
from featurebox.pipeline import load_config, run_pipelined, run_staged
from featurebox.viewpipe import JoinSpec, join_key_bytes, join_views, merge_features

PUBLISHED_LAUNCH_US = 3.45
LAUNCH_TABLE = ((1, 4.0), (10, 35.0), (100, 360.0), (1000, 3619.0), (10000, 34515.0))


def _verdict(capfd, number: int, name: str, ok: bool, detail: str) -> None:
    with capfd.disabled():
        print(f"[criterion {number}] {name}: {'PASS' if ok else 'FAIL'} ({detail})")
    assert ok, f"{name}: {detail}"


# -- shared large corpus (criteria 5 and 8) -----------------------------------------


@pytest.fixture(scope="module")
def big_runs(tmp_path_factory):
    dest = tmp_path_factory.mktemp("bigcorpus")
    paths = gen_corpus(dest, rows=100_000, users=5_000, seed=11)
    config = load_config(paths["config"])
    timings = {}
    t0 = time.perf_counter()
    staged = run_staged(replace(config, workers=2))
    timings["staged"] = time.perf_counter() - t0
    t0 = time.perf_counter()
    piped1 = run_pipelined(replace(config, workers=1))
    timings["pipelined_w1"] = time.perf_counter() - t0
    t0 = time.perf_counter()
    piped8 = run_pipelined(replace(config, workers=8))
    timings["pipelined_w8"] = time.perf_counter() - t0
    return {
        "config": config,
        "staged": staged,
        "piped1": piped1,
        "piped8": piped8,
        "timings": timings,
    }


# -- criterion 1: launch overhead calibration ----------------------------------------


def test_launch_overhead_calibration(capfd):
    model = calibrate_launch_overhead(LAUNCH_TABLE)
    fitted = model.per_launch_overhead_us
    rel = abs(fitted - PUBLISHED_LAUNCH_US) / PUBLISHED_LAUNCH_US
    _verdict(
        capfd,
        1,
        "launch overhead calibration",
        rel < 0.10,
        f"fitted {fitted:.6f} us vs published {PUBLISHED_LAUNCH_US} us, "
        f"rel err {rel:.4%}",
    )


# -- criterion 2: per-layer fusion launch saving -------------------------------------


def test_fused_launch_saving(capfd):
    heavy = 1 << 30  # far beyond any device budget -> stays on the host
    specs = (
        OperatorSpec(
            "alpha",
            inputs=("query",),
            outputs=("alpha_sig",),
            body=FunctionRef("hash:1"),
            post_calls=(FunctionRef("mix"),),
        ),
        OperatorSpec(
            "beta",
            inputs=("query",),
            outputs=("beta_sig",),
            body=FunctionRef("hash:2"),
            pre_calls=(FunctionRef("trim", arg=0, footprint_bytes=heavy),),
            post_calls=(FunctionRef("mix"),),
        ),
        OperatorSpec(
            "gamma",
            inputs=("city",),
            outputs=("gamma_sig",),
            body=FunctionRef("hash:3"),
            pre_calls=(FunctionRef("trim", arg=0, footprint_bytes=heavy),),
            post_calls=(FunctionRef("fold"),),
        ),
    )
    dag = expand_call_graph(specs)
    plan = place_operators(layer_schedule(dag), PlacementBudget(1 << 16), dag)
    fused = fused_launch_count(plan)
    unfused = unfused_launch_count(plan)
    saving_us = (unfused - fused) * PUBLISHED_LAUNCH_US
    ok = fused == 3 and unfused == 6 and abs(saving_us - 3 * PUBLISHED_LAUNCH_US) < 1e-9
    _verdict(
        capfd,
        2,
        "meta-kernel launch saving",
        ok,
        f"fused={fused} unfused={unfused} saving={saving_us:.2f}us "
        f"(host nodes: {sorted(n for n, p in plan.placement.items() if p == 'host')})",
    )


# -- criterion 3: layer schedule equals longest path ----------------------------------


def _random_dag(rng: random.Random) -> tuple[OperatorDag, list[str], list[tuple[str, str]]]:
    n = rng.randrange(1, 101)
    names = [f"n{i}" for i in range(n)]
    edges = []
    for j in range(1, n):
        for i in range(j):
            if rng.random() < 2.0 / j:
                edges.append((names[i], names[j]))
    nodes = {
        name: Node(
            name=name,
            role=BODY,
            op=name,
            func=FunctionRef("mix"),
            footprint_bytes=64,
            kind=COMPUTE_BOUND,
        )
        for name in names
    }
    return OperatorDag(nodes, tuple(edges), {}), names, edges


def test_layering_matches_longest_path(capfd):
    rng = random.Random(20260816)
    cases = 1000
    started = time.perf_counter()
    checked_nodes = 0
    for _ in range(cases):
        dag, names, edges = _random_dag(rng)
        plan = layer_schedule(dag)
        layer_of = plan.layer_of

        preds: dict[str, list[str]] = {name: [] for name in names}
        for u, v in edges:
            preds[v].append(u)
        depth: dict[str, int] = {}
        for name in names:  # construction order is topological
            depth[name] = 1 + max((depth[u] for u in preds[name]), default=0)

        assert layer_of == depth
        assert all(layer_of[u] < layer_of[v] for u, v in edges)
        assert sorted(n for layer in plan.layers for n in layer) == sorted(names)
        checked_nodes += len(names)
    elapsed = time.perf_counter() - started
    _verdict(
        capfd,
        3,
        "layer schedule is the longest-path schedule",
        elapsed < 30.0,
        f"{cases} random graphs / {checked_nodes} nodes match the "
        f"independent longest-path depths in {elapsed:.1f}s",
    )


# -- criterion 4: concurrent group allocation stress ----------------------------------


def test_group_allocation_stress(capfd):
    pool = create_pool(384 * (1 << 20))
    started = time.perf_counter()
    result = stress_group_allocations(
        pool, groups=1000, lanes=256, max_size=1024, threads=8, seed=99
    )
    elapsed = time.perf_counter() - started

    assert not result.failures, result.failures[:3]

    regions = []
    expected_head = 0
    expected_advances = 0
    for offsets, sizes in result.grants:
        for off, size in zip(offsets, sizes):
            if size:
                regions.append((off, off + size))
        rounded = round_up_group(sum(sizes))
        expected_head += rounded
        expected_advances += 1 if rounded else 0
    regions.sort()
    overlaps = sum(
        1 for (_, end), (nxt, _) in zip(regions, regions[1:]) if nxt < end
    )

    reset_start = time.perf_counter()
    pool.reset()
    reset_seconds = time.perf_counter() - reset_start

    ok = (
        overlaps == 0
        and result.head_after == expected_head == result.expected_head
        and result.head_advances == expected_advances
        and pool.idle_memory_head == 0
        and reset_seconds < 0.01
        and elapsed < 60.0
    )
    _verdict(
        capfd,
        4,
        "group-cooperative allocation under contention",
        ok,
        f"1000 groups x 256 lanes from 8 threads: {len(regions)} grants, "
        f"{overlaps} overlaps, head {result.head_after} == sum of rounded "
        f"group totals, reset {reset_seconds * 1e6:.0f}us, {elapsed:.1f}s",
    )


# -- criterion 5: staged and pipelined runs agree bit-for-bit -------------------------


def test_staged_equals_pipelined_large(capfd, big_runs):
    staged, piped = big_runs["staged"], big_runs["piped1"]
    config = big_runs["config"]

    on_disk = sum(
        (config.staging_dir / name).stat().st_size
        for name in staged.intermediate_files
    )
    ok = (
        staged.digest == piped.digest
        and staged.instances == piped.instances > 0
        and piped.intermediate_bytes_written == 0
        and not piped.intermediate_files
        and staged.intermediate_bytes_written == on_disk > 0
    )
    t = big_runs["timings"]
    _verdict(
        capfd,
        5,
        "staged == pipelined on the large corpus",
        ok,
        f"100000-instance corpus -> {piped.instances} instances, digest "
        f"0x{piped.digest:016x} both modes; staged wrote "
        f"{staged.intermediate_bytes_written} intermediate bytes, pipelined 0; "
        f"staged {t['staged']:.1f}s, pipelined {t['pipelined_w1']:.1f}s",
    )


# -- criterion 6: projection reads only the projected bytes ---------------------------


def test_projection_byte_accounting(capfd, tmp_path):
    rng = random.Random(5)
    rows = 512
    spec = [(f"c{i}", Kind.INT64) for i in range(10)]
    data = {
        name: [rng.randrange(0, 1 << 40) for _ in range(rows)] for name, _ in spec
    }
    batch = ColumnBatch.from_pydict(spec, data, key_columns=("c0",))
    path = tmp_path / "ten.fbxc"
    write_view(batch, path)

    view = open_view(path)
    wanted = "c4"
    expected = view.header_bytes + sum(
        seg.length for seg in view.segments_of(wanted)
    )
    projected, nbytes = read_columns(view, [wanted])
    file_size = path.stat().st_size

    ok = (
        nbytes == expected
        and projected.column(wanted).to_pylist() == data[wanted]
        and nbytes < file_size
    )
    _verdict(
        capfd,
        6,
        "projection byte accounting",
        ok,
        f"1 of 10 equal-width columns: read {nbytes} bytes == header "
        f"{view.header_bytes} + column segments, file is {file_size} bytes",
    )


# -- criterion 7: join/merge agree with a quadratic oracle ----------------------------


def _oracle_join(left_rows, right_rows, kind):
    """All matching (key, left value, right value) triples, output order."""
    matches = []
    for i, (lk, lv) in enumerate(left_rows):
        if lk is None:
            continue
        for j, (rk, rv) in enumerate(right_rows):
            if rk == lk:
                matches.append((join_key_bytes(kind, lk), i, j, (lk, lv, rv)))
    matches.sort(key=lambda m: m[:3])
    return [m[3] for m in matches]


def test_join_and_merge_match_oracle(capfd):
    started = time.perf_counter()
    cases = 500
    total_rows = 0
    for case in range(cases):
        rng = random.Random(7000 + case)
        kind = rng.choice((Kind.INT64, Kind.UTF8))
        universe: list = (
            [rng.randrange(0, 6) for _ in range(6)]
            if kind is Kind.INT64
            else ["", "a", "bb", "ccc", "dd", "é"]
        )

        def rows(n):
            return [
                (
                    None if rng.random() < 0.15 else rng.choice(universe),
                    rng.randrange(0, 1000),
                )
                for _ in range(n)
            ]

        left_rows = rows(rng.randrange(0, 13))
        right_rows = rows(rng.randrange(0, 13))
        left = ColumnBatch.from_pydict(
            [("k", kind), ("lv", Kind.INT64)],
            {"k": [r[0] for r in left_rows], "lv": [r[1] for r in left_rows]},
            key_columns=("k",),
        )
        right = ColumnBatch.from_pydict(
            [("k", kind), ("rv", Kind.INT64)],
            {"k": [r[0] for r in right_rows], "rv": [r[1] for r in right_rows]},
            key_columns=("k",),
        )
        joined = join_views(left, right, JoinSpec(("k",)))
        got = [
            tuple(joined.columns[c].get(i) for c in ("k", "lv", "rv"))
            for i in range(joined.row_count)
        ]
        assert got == _oracle_join(left_rows, right_rows, kind), f"case {case}"
        total_rows += joined.row_count

        if case % 5 == 0:
            ids = rng.sample(range(100), rng.randrange(0, 10))
            other = rng.sample(range(100), rng.randrange(0, 10))
            extracted = ColumnBatch.from_pydict(
                [("instance_id", Kind.INT64), ("sig", Kind.INT64)],
                {"instance_id": ids, "sig": [i * 3 for i in ids]},
                key_columns=("instance_id",),
            )
            basic = ColumnBatch.from_pydict(
                [("instance_id", Kind.INT64), ("base", Kind.INT64)],
                {"instance_id": other, "base": [i * 7 for i in other]},
                key_columns=("instance_id",),
            )
            merged = merge_features(extracted, basic)
            expect = sorted(
                (i, i * 3, i * 7) for i in set(ids) & set(other)
            )
            got_merge = sorted(
                tuple(merged.columns[c].get(r) for c in ("instance_id", "sig", "base"))
                for r in range(merged.row_count)
            )
            assert got_merge == expect, f"merge case {case}"
    elapsed = time.perf_counter() - started
    _verdict(
        capfd,
        7,
        "join/merge match the nested-loop oracle",
        elapsed < 30.0,
        f"{cases} random joins ({total_rows} output rows) and "
        f"{cases // 5} merges agree with the quadratic oracle in {elapsed:.1f}s",
    )


# -- criterion 8: worker count never changes the batches ------------------------------


def test_worker_count_determinism(capfd, big_runs):
    one, eight = big_runs["piped1"], big_runs["piped8"]
    ok = (
        one.digest == eight.digest
        and one.instances == eight.instances
        and one.batches == eight.batches
        and one.signs == eight.signs
    )
    _verdict(
        capfd,
        8,
        "pipelined digest is worker-count independent",
        ok,
        f"workers 1 vs 8: digest 0x{one.digest:016x} both, "
        f"{one.batches} batches, {one.signs} signs",
    )
