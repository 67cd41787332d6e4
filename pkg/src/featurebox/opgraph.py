"""Call-graph expansion, layer scheduling, and host/device placement.

Every declared operator expands into fine-granularity nodes: one body node
plus one node per pre/post function call.  Pre-call nodes feed the body,
the body feeds post-call nodes, and column producers feed consumers.
Layers are assigned by longest-path depth from the sources, so operators
within one layer never share a dependency edge and can execute together
between barriers.  Placement sends a node to the host exactly when its
declared footprint exceeds the device budget, inserting one host-to-device
transfer node per host-producer/device-consumer edge.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

from .featureops import FeatureConfigError, FunctionRef, OperatorSpec

DEVICE = "device"
HOST = "host"

BODY = "body"
PRE = "pre"
POST = "post"


class CycleError(ValueError):
    """The operator dependency graph contains a cycle."""


class InvalidPlanError(ValueError):
    """A layer plan violates its structural invariants."""


@dataclass(frozen=True)
class Node:
    """One fine-granularity operator in the expanded graph.

    ``reads`` are the columns the node consumes from the table or from
    other operators; pre/body ordering within one declared operator is
    carried by explicit edges, not by reads.  ``writes`` are the output
    columns this node produces (body when the operator has no post-calls,
    otherwise each post-call owns one output).
    """

    name: str
    role: str
    op: str
    func: FunctionRef
    footprint_bytes: int
    kind: str
    reads: tuple[str, ...] = ()
    writes: tuple[str, ...] = ()
    slot: int | None = None  # pre-call: which input slot it preprocesses
    out_index: int | None = None  # post-call: which output it writes


@dataclass
class OperatorDag:
    """Expanded dependency graph over fine-granularity nodes."""

    nodes: dict[str, Node]
    edges: tuple[tuple[str, str], ...]
    col_producer: dict[str, str]

    def __post_init__(self):
        self.preds: dict[str, tuple[str, ...]] = {n: () for n in self.nodes}
        self.succs: dict[str, tuple[str, ...]] = {n: () for n in self.nodes}
        pred_sets: dict[str, list[str]] = {n: [] for n in self.nodes}
        succ_sets: dict[str, list[str]] = {n: [] for n in self.nodes}
        for u, v in self.edges:
            pred_sets[v].append(u)
            succ_sets[u].append(v)
        for n in self.nodes:
            self.preds[n] = tuple(sorted(pred_sets[n]))
            self.succs[n] = tuple(sorted(succ_sets[n]))

    def external_inputs(self) -> tuple[str, ...]:
        """Columns read by some node but produced by none (table columns)."""
        read = {c for node in self.nodes.values() for c in node.reads}
        return tuple(sorted(read - set(self.col_producer)))

    def body_nodes(self) -> tuple[str, ...]:
        return tuple(sorted(n for n, nd in self.nodes.items() if nd.role == BODY))


def _find_cycle(nodes: Iterable[str], succs: Mapping[str, Sequence[str]]) -> list[str]:
    color: dict[str, int] = {}
    stack: list[str] = []

    def visit(u: str) -> list[str] | None:
        color[u] = 1
        stack.append(u)
        for v in succs.get(u, ()):
            if color.get(v, 0) == 1:
                return stack[stack.index(v) :] + [v]
            if color.get(v, 0) == 0:
                found = visit(v)
                if found:
                    return found
        stack.pop()
        color[u] = 2
        return None

    for n in sorted(nodes):
        if color.get(n, 0) == 0:
            found = visit(n)
            if found:
                return found
    return []


def expand_call_graph(specs: Sequence[OperatorSpec]) -> OperatorDag:
    """Expand declared operators into the fine-granularity dependency DAG.

    Node count is sum over operators of 1 + len(pre_calls) +
    len(post_calls).  Edges: each pre-call node into its caller's body,
    the body into each of its post-call nodes, and every column producer
    into every node that reads that column.
    """
    names = [s.name for s in specs]
    if len(set(names)) != len(names):
        dup = sorted({n for n in names if names.count(n) > 1})
        raise FeatureConfigError(f"duplicate operator names: {dup}")

    nodes: dict[str, Node] = {}
    edges: set[tuple[str, str]] = set()
    col_producer: dict[str, str] = {}

    def add_node(node: Node) -> None:
        nodes[node.name] = node
        for col in node.writes:
            if col in col_producer:
                raise FeatureConfigError(
                    f"output column {col!r} produced by both "
                    f"{col_producer[col]!r} and {node.name!r}"
                )
            col_producer[col] = node.name

    for spec in specs:
        pre_slots = {spec.pre_slot(i) for i in range(len(spec.pre_calls))}
        body_reads = tuple(
            col for i, col in enumerate(spec.inputs) if i not in pre_slots
        )
        add_node(
            Node(
                name=spec.name,
                role=BODY,
                op=spec.name,
                func=spec.body,
                footprint_bytes=spec.footprint_bytes,
                kind=spec.kind,
                reads=body_reads,
                writes=() if spec.post_calls else spec.outputs,
            )
        )
        for i, ref in enumerate(spec.pre_calls):
            slot = spec.pre_slot(i)
            name = f"{spec.name}.pre{i + 1}"
            add_node(
                Node(
                    name=name,
                    role=PRE,
                    op=spec.name,
                    func=ref,
                    footprint_bytes=ref.footprint_bytes,
                    kind=ref.kind,
                    reads=(spec.inputs[slot],),
                    slot=slot,
                )
            )
            edges.add((name, spec.name))
        for j, ref in enumerate(spec.post_calls):
            name = f"{spec.name}.post{j + 1}"
            add_node(
                Node(
                    name=name,
                    role=POST,
                    op=spec.name,
                    func=ref,
                    footprint_bytes=ref.footprint_bytes,
                    kind=ref.kind,
                    writes=(spec.outputs[j],),
                    out_index=j,
                )
            )
            edges.add((spec.name, name))

    for node in nodes.values():
        for col in node.reads:
            producer = col_producer.get(col)
            if producer is not None:
                edges.add((producer, node.name))

    dag = OperatorDag(nodes, tuple(sorted(edges)), col_producer)
    cycle = _find_cycle(dag.nodes, dag.succs)
    if cycle:
        raise CycleError("dependency cycle: " + " -> ".join(cycle))
    return dag


@dataclass(frozen=True)
class Transfer:
    """Host-to-device move of one producer's output for one consumer.

    A transfer executes at the start of its layer, strictly after the
    producer's layer barrier and before any compute in its own layer.
    """

    name: str
    producer: str
    consumer: str
    layer: int


@dataclass(frozen=True)
class PlacementBudget:
    """Device memory threshold: larger footprints go to the host."""

    device_memory_bytes: int | float

    def __post_init__(self):
        if not self.device_memory_bytes > 0:
            raise ValueError("device_memory_bytes must be positive")


@dataclass(frozen=True)
class LayerPlan:
    """Layered, optionally placed schedule of an OperatorDag.

    ``layers[i]`` holds the names of nodes at depth i+1, sorted by name.
    ``placement`` is empty until place_operators runs.
    """

    layers: tuple[tuple[str, ...], ...]
    placement: Mapping[str, str] = field(default_factory=dict)
    transfers: tuple[Transfer, ...] = ()

    @property
    def layer_of(self) -> dict[str, int]:
        return {
            name: i + 1 for i, layer in enumerate(self.layers) for name in layer
        }

    @property
    def placed(self) -> bool:
        return bool(self.placement)

    def device_nodes(self, layer_index: int) -> tuple[str, ...]:
        """Device-placed members of the 1-based layer, in name order."""
        return tuple(
            n for n in self.layers[layer_index - 1] if self.placement[n] == DEVICE
        )

    def host_nodes(self, layer_index: int) -> tuple[str, ...]:
        return tuple(
            n for n in self.layers[layer_index - 1] if self.placement[n] == HOST
        )

    def transfers_into(self, layer_index: int) -> tuple[Transfer, ...]:
        return tuple(t for t in self.transfers if t.layer == layer_index)


def layer_schedule(dag: OperatorDag) -> LayerPlan:
    """Assign each node its longest-path depth from the sources.

    Sources sit in layer 1; every other node sits one past its deepest
    predecessor.  Within a layer, nodes are ordered by name.
    """
    indegree = {n: len(dag.preds[n]) for n in dag.nodes}
    ready = sorted(n for n, d in indegree.items() if d == 0)
    depth: dict[str, int] = {n: 1 for n in ready}
    order: list[str] = []
    while ready:
        u = ready.pop()
        order.append(u)
        for v in dag.succs[u]:
            depth[v] = max(depth.get(v, 1), depth[u] + 1)
            indegree[v] -= 1
            if indegree[v] == 0:
                ready.append(v)
                ready.sort()
    if len(order) != len(dag.nodes):
        cycle = _find_cycle(dag.nodes, dag.succs)
        raise CycleError("dependency cycle: " + " -> ".join(cycle))

    n_layers = max(depth.values(), default=0)
    buckets: list[list[str]] = [[] for _ in range(n_layers)]
    for name, d in depth.items():
        buckets[d - 1].append(name)
    return LayerPlan(layers=tuple(tuple(sorted(b)) for b in buckets))


def place_operators(
    plan: LayerPlan, budget: PlacementBudget, dag: OperatorDag
) -> LayerPlan:
    """Place every node and insert H2D transfers for host->device edges.

    A node goes to the host exactly when its footprint exceeds the budget.
    Each edge from a host producer to a device consumer gets one transfer
    node in the consumer's layer (executing at that layer's start); compute
    layers themselves are not re-assigned by placement.
    """
    placement = {
        name: HOST if node.footprint_bytes > budget.device_memory_bytes else DEVICE
        for name, node in dag.nodes.items()
    }
    layer_of = plan.layer_of
    transfers = []
    for u, v in dag.edges:
        if placement[u] == HOST and placement[v] == DEVICE:
            transfers.append(
                Transfer(
                    name=f"h2d:{u}->{v}",
                    producer=u,
                    consumer=v,
                    layer=layer_of[v],
                )
            )
    transfers.sort(key=lambda t: (t.layer, t.producer, t.consumer))
    placed = LayerPlan(plan.layers, placement, tuple(transfers))
    validate_plan(placed, dag)
    return placed


def validate_plan(plan: LayerPlan, dag: OperatorDag) -> None:
    """Check plan invariants; raises InvalidPlanError on violation.

    Edge order is checked on (layer, phase) with transfers at phase 0 and
    compute at phase 1, so a transfer precedes everything it feeds even
    within its own layer.
    """
    layer_of = plan.layer_of
    if set(layer_of) != set(dag.nodes):
        raise InvalidPlanError("plan nodes differ from dag nodes")
    for u, v in dag.edges:
        if layer_of[u] >= layer_of[v]:
            raise InvalidPlanError(
                f"edge {u}->{v} not strictly layered "
                f"({layer_of[u]} >= {layer_of[v]})"
            )
    for name in dag.nodes:
        preds = dag.preds[name]
        expected = 1 + max((layer_of[p] for p in preds), default=0)
        if layer_of[name] != expected:
            raise InvalidPlanError(
                f"{name}: layer {layer_of[name]}, longest-path depth {expected}"
            )
    if plan.placed:
        for name in dag.nodes:
            if name not in plan.placement:
                raise InvalidPlanError(f"{name}: missing placement")
        for t in plan.transfers:
            if plan.placement[t.producer] != HOST:
                raise InvalidPlanError(f"{t.name}: producer not on host")
            if plan.placement[t.consumer] != DEVICE:
                raise InvalidPlanError(f"{t.name}: consumer not on device")
            # (layer, phase) order: producer compute < transfer < consumer
            # compute, with transfers at phase 0 of their layer.
            if not layer_of[t.producer] < t.layer:
                raise InvalidPlanError(f"{t.name}: runs before its producer")
            if not t.layer <= layer_of[t.consumer]:
                raise InvalidPlanError(f"{t.name}: runs after its consumer")


def fused_launch_count(plan: LayerPlan) -> int:
    """Launches in fused mode: one per layer that has any device node."""
    if not plan.placed:
        raise InvalidPlanError("plan is not placed")
    return sum(
        1 for i in range(1, len(plan.layers) + 1) if plan.device_nodes(i)
    )


def unfused_launch_count(plan: LayerPlan) -> int:
    """Launches in the unfused baseline: one per device node."""
    if not plan.placed:
        raise InvalidPlanError("plan is not placed")
    return sum(
        len(plan.device_nodes(i)) for i in range(1, len(plan.layers) + 1)
    )


def plan_report(plan: LayerPlan, dag: OperatorDag, per_launch_overhead_us: float) -> str:
    """Deterministic text rendering of a placed plan."""
    if not plan.placed:
        raise InvalidPlanError("plan is not placed")
    fused = fused_launch_count(plan)
    unfused = unfused_launch_count(plan)
    saving = (unfused - fused) * per_launch_overhead_us
    lines = [
        f"plan: {len(dag.nodes)} operators, {len(plan.layers)} layers, "
        f"{fused} device layers"
    ]
    for i, layer in enumerate(plan.layers, 1):
        members = ", ".join(
            f"{name} ({dag.nodes[name].func.spec}) [{plan.placement[name]}]"
            for name in layer
        )
        lines.append(f"layer {i}: {members}")
    lines.append(f"transfers: {len(plan.transfers)}")
    for t in plan.transfers:
        lines.append(f"  h2d {t.producer} -> {t.consumer} (layer {t.layer})")
    lines.append(f"launches: fused={fused} unfused={unfused}")
    lines.append(
        f"overhead: fused={fused * per_launch_overhead_us:.2f}us "
        f"unfused={unfused * per_launch_overhead_us:.2f}us "
        f"saving={saving:.2f}us (per-launch {per_launch_overhead_us:.2f}us)"
    )
    return "\n".join(lines)
