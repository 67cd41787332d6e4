"""Execution backends: host worker pool and a simulated wide device.

The device executes one fused meta-kernel per layer: all device-placed
nodes of the layer run sequentially under a single accounted launch, with
lanes grouped for cooperative arena allocation.  Host-placed nodes run on
a thread pool concurrently with the meta-kernel; a barrier closes every
layer, after which the arena pool is reset.  Launch overhead is accounted
through a cost model calibrated by least squares on (launch count, total
time) measurements, not physically incurred.
"""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Callable, Mapping, Sequence

from . import featureops
from .featureops import Function, OperatorSpec, resolve_function
from .mempool import ArenaPool, GroupRequest
from .opgraph import BODY, POST, PRE, LayerPlan, Node, OperatorDag

DEFAULT_LAUNCH_OVERHEAD_US = 3.45

FUSED = "fused"
UNFUSED = "unfused"

# Host nodes fan out across workers only above this row count; below it the
# split overhead outweighs the work.
_HOST_SPLIT_MIN_ROWS = 2048


class LayerExecutionError(RuntimeError):
    """An operator body failed; identifies the layer and the node."""

    def __init__(self, layer_index: int, node: str, cause: BaseException):
        super().__init__(f"layer {layer_index}: operator {node!r} failed: {cause}")
        self.layer_index = layer_index
        self.node = node
        self.__cause__ = cause


class BarrierError(RuntimeError):
    """A node observed an input not committed by an earlier layer."""


class MissingInputError(KeyError):
    """A node read a column that no table or operator provides."""


@dataclass(frozen=True)
class LaunchCostModel:
    """Per-launch overhead fitted from (launch_count, total_us) points."""

    per_launch_overhead_us: float
    measurements: tuple[tuple[int, float], ...] = ()

    def __post_init__(self):
        if not self.per_launch_overhead_us > 0:
            raise ValueError("per_launch_overhead_us must be positive")


def calibrate_launch_overhead(
    measurements: Sequence[tuple[int, float]],
) -> LaunchCostModel:
    """Fit total = slope * count by least squares through the origin."""
    points = [(int(c), float(t)) for c, t in measurements]
    if len(points) < 2:
        raise ValueError("calibration needs at least 2 measurements")
    if any(c <= 0 for c, _ in points):
        raise ValueError("launch counts must be positive")
    num = sum(c * t for c, t in points)
    den = sum(c * c for c, _ in points)
    slope = num / den
    if slope <= 0:
        raise ValueError("measurements imply non-positive launch overhead")
    return LaunchCostModel(slope, tuple(points))


def host_worker_count(requested: int | None = None) -> int:
    """Effective host workers: requested (or CPU count), env-capped.

    FEATUREBOX_THREADS, when set, is an upper bound on the result.
    """
    base = requested if requested is not None else (os.cpu_count() or 1)
    cap_text = os.environ.get("FEATUREBOX_THREADS")
    if cap_text:
        try:
            cap = int(cap_text)
        except ValueError:
            raise ValueError(f"FEATUREBOX_THREADS={cap_text!r} is not an integer")
        if cap < 1:
            raise ValueError("FEATUREBOX_THREADS must be >= 1")
        base = min(base, cap)
    return max(1, base)


@dataclass
class ExecContext:
    """Backend handles and accounting counters for one pipeline run."""

    cost_model: LaunchCostModel
    pool: ArenaPool | None = None
    work_groups: int = 8
    lanes_per_group: int = 256
    host_workers: int = 1
    bandwidth_bytes_per_s: float = 1e9
    fusion: str = FUSED
    launches: int = 0
    overhead_us: float = 0.0
    bytes_h2d: int = 0
    transfer_seconds: float = 0.0
    _executor: ThreadPoolExecutor | None = None

    def __post_init__(self):
        if self.fusion not in (FUSED, UNFUSED):
            raise ValueError(f"fusion must be {FUSED!r} or {UNFUSED!r}")
        if self.lanes_per_group < 1 or self.work_groups < 1:
            raise ValueError("device shape must be at least 1x1")
        if self.host_workers < 1:
            raise ValueError("host_workers must be >= 1")
        if not self.bandwidth_bytes_per_s > 0:
            raise ValueError("bandwidth must be positive")

    @property
    def executor(self) -> ThreadPoolExecutor:
        if self._executor is None:
            self._executor = ThreadPoolExecutor(max_workers=self.host_workers)
        return self._executor

    def count_launches(self, n: int) -> None:
        self.launches += n
        self.overhead_us += n * self.cost_model.per_launch_overhead_us

    def record_transfer(self, nbytes: int) -> None:
        self.bytes_h2d += nbytes
        self.transfer_seconds += nbytes / self.bandwidth_bytes_per_s

    def close(self) -> None:
        if self._executor is not None:
            self._executor.shutdown(wait=True)
            self._executor = None

    def __enter__(self) -> "ExecContext":
        return self

    def __exit__(self, *exc) -> None:
        self.close()


@dataclass(frozen=True)
class MetaKernel:
    """All device bodies of one layer, fused under a single launch."""

    layer_index: int
    ops: tuple[str, ...]
    pool: ArenaPool | None = None


def build_meta_kernels(
    plan: LayerPlan, pool: ArenaPool | None = None
) -> list[MetaKernel]:
    """One meta-kernel per layer that has at least one device node."""
    kernels = []
    for i in range(1, len(plan.layers) + 1):
        ops = plan.device_nodes(i)
        if ops:
            kernels.append(MetaKernel(i, ops, pool))
    return kernels


@dataclass
class GroupKernel:
    """Per-lane size estimate and kernel for group-cooperative execution."""

    lane_size: Callable
    lane_run: Callable  # (value, data, offset) -> value


def run_device_group(
    kernel: GroupKernel, group_inputs: Sequence, pool: ArenaPool
) -> list:
    """Run one work-group: allocate cooperatively, then run each lane.

    Zero active lanes allocate nothing.  Exhaustion propagates from the
    pool with the head unchanged.
    """
    if not group_inputs:
        return []
    sizes = tuple(kernel.lane_size(v) for v in group_inputs)
    grant = pool.group_allocate(GroupRequest(sizes))
    return [
        kernel.lane_run(value, pool.data, offset)
        for value, offset in zip(group_inputs, grant.offsets)
    ]


def vector_nbytes(vec: Sequence) -> int:
    """Approximate wire size of a column vector for transfer accounting."""
    total = 0
    for v in vec:
        if v is None:
            continue
        if isinstance(v, str):
            total += len(v.encode("utf-8")) + 4
        elif isinstance(v, float):
            total += 4
        else:
            total += 8
    return total


class BatchState:
    """Column vectors flowing through one extraction run, version-stamped.

    Base table columns carry version 0; a node's output carries the index
    of the layer that committed it.  Reads assert that the producing layer
    is strictly earlier than the reading layer, which is the barrier
    correctness check.
    """

    def __init__(
        self, base_columns: Mapping[str, list], col_producer: Mapping[str, str]
    ):
        self.vectors: dict[str, list] = dict(base_columns)
        self.version: dict[str, int] = {name: 0 for name in base_columns}
        self.col_producer = dict(col_producer)

    def put(self, name: str, vec: list, layer_index: int) -> None:
        if name in self.vectors:
            raise BarrierError(f"{name!r} committed twice")
        self.vectors[name] = vec
        self.version[name] = layer_index

    def read_node(self, name: str, at_layer: int) -> list:
        if name not in self.vectors:
            raise MissingInputError(name)
        if self.version[name] >= at_layer:
            raise BarrierError(
                f"{name!r} read at layer {at_layer} but committed at "
                f"layer {self.version[name]}"
            )
        return self.vectors[name]

    def read_column(self, column: str, at_layer: int) -> list:
        producer = self.col_producer.get(column)
        if producer is not None:
            return self.read_node(producer, at_layer)
        if column not in self.vectors:
            raise MissingInputError(column)
        if self.version[column] >= at_layer:
            raise BarrierError(f"column {column!r} not yet committed")
        return self.vectors[column]

    def output_columns(self) -> dict[str, list]:
        """Final vectors of every produced output column."""
        return {
            col: self.vectors[node] for col, node in self.col_producer.items()
        }


class NodeEvaluator:
    """Evaluates one expanded node over a batch of rows.

    Resolution happens once at construction: every node's function spec is
    looked up and its arity checked, so configuration errors surface
    before any data moves.
    """

    def __init__(
        self,
        dag: OperatorDag,
        specs: Mapping[str, OperatorSpec],
        tables: Mapping[str, featureops.DictTable] | None = None,
    ):
        self.dag = dag
        self.specs = dict(specs)
        self.fns: dict[str, Function] = {}
        for name, node in dag.nodes.items():
            fn = resolve_function(node.func.spec, tables)
            want = "tuple" if node.role == BODY else "scalar"
            if fn.arity != want:
                raise featureops.FeatureConfigError(
                    f"{name}: function {node.func.spec!r} has arity "
                    f"{fn.arity}, {node.role} node needs {want}"
                )
            self.fns[name] = fn
        # pre-node lookup: operator name -> {input slot: pre node name}
        self.pre_of: dict[str, dict[int, str]] = {}
        for name, node in dag.nodes.items():
            if node.role == PRE:
                self.pre_of.setdefault(node.op, {})[node.slot] = name

    def eval(
        self,
        node: Node,
        state: BatchState,
        ctx: ExecContext,
        on_device: bool,
        layer_index: int,
        row_range: tuple[int, int] | None = None,
    ) -> list:
        fn = self.fns[node.name]
        if node.role == PRE:
            vals = state.read_column(node.reads[0], layer_index)
            if row_range:
                vals = vals[row_range[0] : row_range[1]]
            return self._map_scalar(fn, vals, ctx, on_device)
        if node.role == POST:
            vals = state.read_node(node.op, layer_index)
            if row_range:
                vals = vals[row_range[0] : row_range[1]]
            return self._map_scalar(fn, vals, ctx, on_device)
        # body: substitute preprocessed slots, then collapse tuples
        spec = self.specs[node.op]
        slot_vecs = []
        pre_map = self.pre_of.get(node.op, {})
        for i, col in enumerate(spec.inputs):
            if i in pre_map:
                slot_vecs.append(state.read_node(pre_map[i], layer_index))
            else:
                slot_vecs.append(state.read_column(col, layer_index))
        if row_range:
            slot_vecs = [v[row_range[0] : row_range[1]] for v in slot_vecs]
        return [fn.map_tuple(row) for row in zip(*slot_vecs)]

    def _map_scalar(
        self, fn: Function, vals: list, ctx: ExecContext, on_device: bool
    ) -> list:
        if fn.needs_pool and on_device and ctx.pool is not None:
            kernel = GroupKernel(fn.lane_size, fn.lane_run)
            out: list = []
            step = ctx.lanes_per_group
            for lo in range(0, len(vals), step):
                out.extend(run_device_group(kernel, vals[lo : lo + step], ctx.pool))
            return out
        return [fn.map_scalar(v) for v in vals]


def execute_layer(
    ctx: ExecContext,
    plan: LayerPlan,
    dag: OperatorDag,
    layer_index: int,
    state: BatchState,
    evaluator: NodeEvaluator,
) -> BatchState:
    """Run one layer: transfers, host pool alongside the meta-kernel, barrier.

    All results commit at the barrier with this layer's version stamp; the
    arena pool is reset once the meta-kernel has finished.
    """
    for t in plan.transfers_into(layer_index):
        ctx.record_transfer(vector_nbytes(state.read_node(t.producer, layer_index)))

    device_ops = plan.device_nodes(layer_index)
    host_ops = plan.host_nodes(layer_index)
    results: dict[str, list] = {}
    failure: tuple[str, BaseException] | None = None

    host_futures = []
    for name in host_ops:
        node = dag.nodes[name]
        rows = _node_row_count(node, state, layer_index, evaluator)
        if ctx.host_workers > 1 and rows >= _HOST_SPLIT_MIN_ROWS:
            bounds = _split_ranges(rows, ctx.host_workers)
            futs = [
                ctx.executor.submit(
                    evaluator.eval, node, state, ctx, False, layer_index, rng
                )
                for rng in bounds
            ]
            host_futures.append((name, futs))
        else:
            fut = ctx.executor.submit(
                evaluator.eval, node, state, ctx, False, layer_index
            )
            host_futures.append((name, [fut]))

    if device_ops:
        ctx.count_launches(1 if ctx.fusion == FUSED else len(device_ops))
        for name in device_ops:
            try:
                results[name] = evaluator.eval(
                    dag.nodes[name], state, ctx, True, layer_index
                )
            except BaseException as exc:
                failure = failure or (name, exc)
                break

    for name, futs in host_futures:
        parts = []
        for fut in futs:
            try:
                parts.append(fut.result())
            except BaseException as exc:
                failure = failure or (name, exc)
        if failure is None:
            results[name] = [v for part in parts for v in part]

    if failure is not None:
        raise LayerExecutionError(layer_index, failure[0], failure[1])

    for name, vec in sorted(results.items()):
        state.put(name, vec, layer_index)

    if device_ops and ctx.pool is not None:
        ctx.pool.reset()
    return state


def _node_row_count(
    node: Node, state: BatchState, layer_index: int, evaluator: NodeEvaluator
) -> int:
    if node.role == PRE:
        return len(state.read_column(node.reads[0], layer_index))
    if node.role == POST:
        return len(state.read_node(node.op, layer_index))
    spec = evaluator.specs[node.op]
    pre_map = evaluator.pre_of.get(node.op, {})
    for i, col in enumerate(spec.inputs):
        if i in pre_map:
            return len(state.read_node(pre_map[i], layer_index))
        return len(state.read_column(col, layer_index))
    return 0


def _split_ranges(rows: int, parts: int) -> list[tuple[int, int]]:
    step = (rows + parts - 1) // parts
    return [(lo, min(lo + step, rows)) for lo in range(0, rows, step)]


def execute_plan(
    ctx: ExecContext,
    plan: LayerPlan,
    dag: OperatorDag,
    state: BatchState,
    evaluator: NodeEvaluator,
) -> BatchState:
    """Run all layers in order; layer i+1 starts after i's barrier."""
    for layer_index in range(1, len(plan.layers) + 1):
        execute_layer(ctx, plan, dag, layer_index, state, evaluator)
    return state
