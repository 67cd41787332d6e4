"""Launch cost model, host workers, fused meta-kernels, barrier execution."""

import os

import pytest

from featurebox.device import (
    DEFAULT_LAUNCH_OVERHEAD_US,
    FUSED,
    UNFUSED,
    BarrierError,
    BatchState,
    ExecContext,
    GroupKernel,
    LaunchCostModel,
    LayerExecutionError,
    MetaKernel,
    MissingInputError,
    NodeEvaluator,
    build_meta_kernels,
    calibrate_launch_overhead,
    execute_layer,
    execute_plan,
    host_worker_count,
    run_device_group,
    vector_nbytes,
)
from featurebox.featureops import (
    COMPUTE_BOUND,
    MEMORY_BOUND,
    FeatureConfigError,
    FunctionRef,
    OperatorSpec,
    fnv1a64,
    hash_combine,
    resolve_function,
    value_bytes,
)
from featurebox.mempool import PoolExhausted, create_pool
from featurebox.opgraph import (
    PlacementBudget,
    expand_call_graph,
    layer_schedule,
    place_operators,
)

TABLE_POINTS = [(1, 4.0), (10, 35.0), (100, 360.0), (1000, 3619.0), (10000, 34515.0)]


def _ctx(**kw):
    kw.setdefault("cost_model", LaunchCostModel(2.0))
    return ExecContext(**kw)


# -- launch cost model -----------------------------------------------------------


def test_calibrate_exact_proportional_points():
    model = calibrate_launch_overhead([(1, 7.0), (10, 70.0), (50, 350.0)])
    assert model.per_launch_overhead_us == pytest.approx(7.0)
    assert model.measurements == ((1, 7.0), (10, 70.0), (50, 350.0))


def test_calibrate_published_measurements():
    # Independent least-squares-through-origin computation of the slope.
    num = sum(c * t for c, t in TABLE_POINTS)
    den = sum(c * c for c, _ in TABLE_POINTS)
    model = calibrate_launch_overhead(TABLE_POINTS)
    assert model.per_launch_overhead_us == pytest.approx(num / den)
    rel_err = abs(model.per_launch_overhead_us - DEFAULT_LAUNCH_OVERHEAD_US) / (
        DEFAULT_LAUNCH_OVERHEAD_US
    )
    assert rel_err < 0.10  # the fit lands on the published 3.45us figure


def test_calibrate_dominated_by_large_counts():
    # One noisy small point cannot drag the slope far from the bulk.
    model = calibrate_launch_overhead([(1, 400.0), (10000, 34515.0)])
    assert model.per_launch_overhead_us == pytest.approx(34515.0 / 10000, rel=2e-4)


def test_calibrate_validation():
    with pytest.raises(ValueError):
        calibrate_launch_overhead([(1, 4.0)])
    with pytest.raises(ValueError):
        calibrate_launch_overhead([(0, 4.0), (1, 5.0)])
    with pytest.raises(ValueError):
        calibrate_launch_overhead([(-3, 4.0), (1, 5.0)])
    with pytest.raises(ValueError):
        calibrate_launch_overhead([(1, 0.0), (2, 0.0)])
    with pytest.raises(ValueError):
        LaunchCostModel(0.0)


# -- host worker counting ---------------------------------------------------------


def test_host_worker_count_default(monkeypatch):
    monkeypatch.delenv("FEATUREBOX_THREADS", raising=False)
    assert host_worker_count(5) == 5
    assert host_worker_count() == (os.cpu_count() or 1)


def test_host_worker_count_env_caps(monkeypatch):
    monkeypatch.setenv("FEATUREBOX_THREADS", "2")
    assert host_worker_count(8) == 2
    assert host_worker_count(1) == 1  # cap is an upper bound only


def test_host_worker_count_env_validation(monkeypatch):
    monkeypatch.setenv("FEATUREBOX_THREADS", "bogus")
    with pytest.raises(ValueError):
        host_worker_count(4)
    monkeypatch.setenv("FEATUREBOX_THREADS", "0")
    with pytest.raises(ValueError):
        host_worker_count(4)
    monkeypatch.setenv("FEATUREBOX_THREADS", "")
    assert host_worker_count(4) == 4  # empty means unset


# -- ExecContext accounting --------------------------------------------------------


def test_count_launches_accumulates():
    ctx = _ctx()
    ctx.count_launches(1)
    ctx.count_launches(3)
    assert ctx.launches == 4
    assert ctx.overhead_us == pytest.approx(8.0)


def test_record_transfer_exact_seconds():
    ctx = _ctx(bandwidth_bytes_per_s=1e9)
    ctx.record_transfer(1_000_000)
    assert ctx.bytes_h2d == 1_000_000
    assert ctx.transfer_seconds == pytest.approx(1e-3)
    ctx.record_transfer(500)
    assert ctx.bytes_h2d == 1_000_500


def test_context_validation():
    with pytest.raises(ValueError):
        _ctx(fusion="partial")
    with pytest.raises(ValueError):
        _ctx(lanes_per_group=0)
    with pytest.raises(ValueError):
        _ctx(work_groups=0)
    with pytest.raises(ValueError):
        _ctx(host_workers=0)
    with pytest.raises(ValueError):
        _ctx(bandwidth_bytes_per_s=0)


def test_context_executor_lifecycle():
    with _ctx(host_workers=2) as ctx:
        assert ctx._executor is None  # lazy until first use
        assert ctx.executor.submit(lambda: 41).result() == 41
        assert ctx._executor is not None
    assert ctx._executor is None  # closed on exit


def test_vector_nbytes():
    assert vector_nbytes([]) == 0
    assert vector_nbytes([None, None]) == 0
    assert vector_nbytes(["ab", 1, 2.5, None]) == (2 + 4) + 8 + 4
    assert vector_nbytes(["é"]) == 2 + 4  # utf-8 bytes, not code points


# -- meta-kernel construction --------------------------------------------------------


def _three_op_plan(heavy=("gamma",), budget=1 << 16):
    def pre(op, spec):
        fp = (1 << 30) if op in heavy else 64
        return FunctionRef(
            spec,
            footprint_bytes=fp,
            kind=MEMORY_BOUND if op in heavy else COMPUTE_BOUND,
        )

    specs = [
        OperatorSpec(
            name="alpha",
            inputs=("query",),
            outputs=("alpha_out",),
            body=FunctionRef("hash:1"),
            post_calls=(FunctionRef("mix"),),
        ),
        OperatorSpec(
            name="beta",
            inputs=("query",),
            outputs=("beta_out",),
            body=FunctionRef("hash:2"),
            pre_calls=(pre("beta", "token: :0"),),
            post_calls=(FunctionRef("mix"),),
        ),
        OperatorSpec(
            name="gamma",
            inputs=("city",),
            outputs=("gamma_out",),
            body=FunctionRef("hash:3"),
            pre_calls=(pre("gamma", "trim"),),
            post_calls=(FunctionRef("fold"),),
        ),
    ]
    dag = expand_call_graph(specs)
    plan = place_operators(layer_schedule(dag), PlacementBudget(budget), dag)
    return specs, dag, plan


def test_one_meta_kernel_per_device_layer():
    _, _, plan = _three_op_plan()
    kernels = build_meta_kernels(plan)
    assert [k.layer_index for k in kernels] == [1, 2, 3]
    assert kernels[0].ops == ("alpha", "beta.pre1")  # gamma.pre1 is host
    assert kernels[1].ops == ("alpha.post1", "beta", "gamma")


def test_all_host_plan_builds_no_kernels():
    _, _, plan = _three_op_plan(budget=1)
    assert build_meta_kernels(plan) == []


def test_meta_kernel_carries_pool():
    pool = create_pool(1024)
    _, _, plan = _three_op_plan()
    kernels = build_meta_kernels(plan, pool)
    assert all(k.pool is pool for k in kernels)
    assert isinstance(kernels[0], MetaKernel)


# -- group-cooperative execution -------------------------------------------------------


def test_run_device_group_matches_scalar_fallback():
    fn = resolve_function("token: :1")
    kernel = GroupKernel(fn.lane_size, fn.lane_run)
    pool = create_pool(4096)
    inputs = ["a b c", "x y", "solo", None, "", "p q r s"]
    got = run_device_group(kernel, inputs, pool)
    assert got == [fn.map_scalar(v) for v in inputs]
    assert got == ["b", "y", "", None, "", "q"]


def test_run_device_group_empty_allocates_nothing():
    fn = resolve_function("token: :0")
    pool = create_pool(1024)
    assert run_device_group(GroupKernel(fn.lane_size, fn.lane_run), [], pool) == []
    assert pool.idle_memory_head == 0


def test_run_device_group_exhaustion_propagates():
    fn = resolve_function("token: :0")
    pool = create_pool(128)
    with pytest.raises(PoolExhausted):
        run_device_group(
            GroupKernel(fn.lane_size, fn.lane_run), ["x" * 200], pool
        )
    assert pool.idle_memory_head == 0  # failed group leaves the arena untouched


# -- BatchState barrier semantics -------------------------------------------------------


def test_batch_state_put_and_read():
    state = BatchState({"query": ["a", "b"]}, {})
    state.put("n1", [1, 2], 1)
    assert state.read_node("n1", 2) == [1, 2]
    assert state.read_column("query", 1) == ["a", "b"]


def test_batch_state_rejects_double_commit():
    state = BatchState({}, {})
    state.put("n1", [1], 1)
    with pytest.raises(BarrierError, match="committed twice"):
        state.put("n1", [2], 2)


def test_batch_state_rejects_same_layer_read():
    state = BatchState({}, {})
    state.put("n1", [1], 2)
    with pytest.raises(BarrierError):
        state.read_node("n1", 2)  # needs a barrier between write and read
    assert state.read_node("n1", 3) == [1]


def test_batch_state_missing_input():
    state = BatchState({}, {"col": "producer"})
    with pytest.raises(MissingInputError):
        state.read_node("ghost", 1)
    with pytest.raises(MissingInputError):
        state.read_column("col", 1)  # producer never committed
    with pytest.raises(MissingInputError):
        state.read_column("other", 1)


def test_batch_state_reads_columns_through_producers():
    state = BatchState({}, {"out": "n1"})
    state.put("n1", [10], 1)
    assert state.read_column("out", 2) == [10]
    assert state.output_columns() == {"out": [10]}


# -- NodeEvaluator -----------------------------------------------------------------------


def test_evaluator_checks_arity_up_front():
    spec = OperatorSpec(
        name="bad", inputs=("q",), outputs=("o",), body=FunctionRef("mix")
    )
    dag = expand_call_graph([spec])
    with pytest.raises(FeatureConfigError, match="arity"):
        NodeEvaluator(dag, {"bad": spec})


def test_evaluator_checks_call_arity():
    spec = OperatorSpec(
        name="bad",
        inputs=("q",),
        outputs=("o",),
        body=FunctionRef("hash:1"),
        pre_calls=(FunctionRef("hash:2"),),  # tuple fn in a scalar seat
    )
    dag = expand_call_graph([spec])
    with pytest.raises(FeatureConfigError, match="arity"):
        NodeEvaluator(dag, {"bad": spec})


# -- layer execution ---------------------------------------------------------------------


def _run(specs, dag, plan, columns, **ctx_kw):
    ctx = _ctx(**ctx_kw)
    state = BatchState(dict(columns), dag.col_producer)
    evaluator = NodeEvaluator(dag, {s.name: s for s in specs})
    with ctx:
        execute_plan(ctx, plan, dag, state, evaluator)
    return ctx, state


QUERIES = ["find shoes", "boots", None, "red sneakers now"]
CITIES = [" nyc", "sf ", " la ", None]


def _expected_outputs():
    """Independent recomputation of the three operators' outputs."""
    mix = lambda v: None if v is None else fnv1a64((v & ((1 << 64) - 1)).to_bytes(8, "big"))
    fold = lambda v: None if v is None else (v >> 32) ^ (v & 0xFFFFFFFF)
    h = lambda slot, v: None if v is None else hash_combine([value_bytes(v)], slot).sign
    tok0 = lambda s: None if s is None else (s.split(" ")[0] if s.split(" ") else "")
    alpha = [mix(h(1, q)) for q in QUERIES]
    beta = [mix(h(2, tok0(q))) for q in QUERIES]
    gamma = [fold(h(3, None if c is None else c.strip())) for c in CITIES]
    return {"alpha_out": alpha, "beta_out": beta, "gamma_out": gamma}


def test_execute_plan_fused_counts_one_launch_per_device_layer():
    specs, dag, plan = _three_op_plan()
    ctx, state = _run(specs, dag, plan, {"query": QUERIES, "city": CITIES})
    assert ctx.launches == 3  # layers all keep at least one device node
    assert ctx.overhead_us == pytest.approx(3 * 2.0)
    assert state.output_columns() == _expected_outputs()


def test_execute_plan_unfused_counts_each_device_node():
    specs, dag, plan = _three_op_plan()
    ctx, state = _run(
        specs, dag, plan, {"query": QUERIES, "city": CITIES}, fusion=UNFUSED
    )
    assert ctx.launches == 7  # 8 nodes, gamma.pre1 on host
    assert state.output_columns() == _expected_outputs()


def test_fusion_saving_is_layer_count_difference():
    specs, dag, plan = _three_op_plan()
    fused, _ = _run(specs, dag, plan, {"query": QUERIES, "city": CITIES})
    unfused, _ = _run(
        specs, dag, plan, {"query": QUERIES, "city": CITIES}, fusion=UNFUSED
    )
    assert unfused.launches - fused.launches == 4
    assert unfused.overhead_us - fused.overhead_us == pytest.approx(4 * 2.0)


def test_transfer_recorded_for_host_produced_input():
    specs, dag, plan = _three_op_plan()
    ctx, _ = _run(specs, dag, plan, {"query": QUERIES, "city": CITIES})
    trimmed = [None if c is None else c.strip() for c in CITIES]
    expected = sum(len(s.encode()) + 4 for s in trimmed if s is not None)
    assert ctx.bytes_h2d == expected
    assert ctx.transfer_seconds == pytest.approx(expected / 1e9)


def test_all_host_plan_never_launches():
    specs, dag, plan = _three_op_plan(budget=1)
    ctx, state = _run(specs, dag, plan, {"query": QUERIES, "city": CITIES})
    assert ctx.launches == 0
    assert ctx.overhead_us == 0.0
    assert ctx.bytes_h2d == 0  # host-to-host edges move nothing
    assert state.output_columns() == _expected_outputs()


def test_device_pool_route_matches_fallback_and_resets():
    specs, dag, plan = _three_op_plan()
    pool = create_pool(1 << 16)
    ctx, state = _run(
        specs, dag, plan, {"query": QUERIES, "city": CITIES},
        pool=pool, lanes_per_group=2,
    )
    assert state.output_columns() == _expected_outputs()
    assert pool.idle_memory_head == 0  # reset after each device layer
    assert pool.head_advances > 0  # the token pre-call really used the arena
    assert pool.resets >= 1


def test_worker_fanout_is_deterministic():
    # 3000 rows crosses the fan-out threshold; gamma.pre1 rides the host
    # pool, so its split/concat path must preserve row order exactly.
    n = 3000
    queries = [f"term{i} extra" for i in range(n)]
    cities = [f"  city{i % 17} " if i % 5 else None for i in range(n)]
    specs, dag, plan = _three_op_plan()
    _, s1 = _run(specs, dag, plan, {"query": queries, "city": cities},
                 host_workers=1)
    _, s4 = _run(specs, dag, plan, {"query": queries, "city": cities},
                 host_workers=4)
    assert s1.output_columns() == s4.output_columns()


def test_layer_error_names_node_and_layer():
    specs, dag, plan = _three_op_plan()
    bad_queries = ["fine", ["not", "hashable"], "fine"]
    bad_cities = ["a", "b", "c"]
    with pytest.raises(LayerExecutionError) as exc:
        _run(specs, dag, plan, {"query": bad_queries, "city": bad_cities})
    assert exc.value.node in {"alpha", "beta"}
    assert exc.value.layer_index in {1, 2}
    assert isinstance(exc.value.__cause__, TypeError)


def test_host_node_failure_names_the_host_node():
    class Boom:
        def __str__(self):
            raise RuntimeError("unprintable")

    specs, dag, plan = _three_op_plan()
    with pytest.raises(LayerExecutionError) as exc:
        _run(specs, dag, plan, {"query": QUERIES, "city": [Boom()] * 4})
    assert exc.value.node == "gamma.pre1"  # the host-placed pre-call
    assert exc.value.layer_index == 1
    assert isinstance(exc.value.__cause__, RuntimeError)


def test_execute_layer_surfaces_barrier_violation():
    # A hand-built plan that puts a producer and its consumer in the same
    # layer slips past scheduling; the version stamps still catch it.
    from featurebox.opgraph import LayerPlan

    specs, dag, _ = _three_op_plan()
    flat = LayerPlan(
        layers=(tuple(sorted(dag.nodes)),),
        placement={n: "device" for n in dag.nodes},
        transfers=(),
    )
    evaluator = NodeEvaluator(dag, {s.name: s for s in specs})
    state = BatchState({"query": QUERIES, "city": CITIES}, dag.col_producer)
    with _ctx() as ctx:
        with pytest.raises(LayerExecutionError) as exc:
            execute_layer(ctx, flat, dag, 1, state, evaluator)
    assert isinstance(exc.value.__cause__, (BarrierError, MissingInputError))
