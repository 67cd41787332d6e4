"""End-to-end pipeline in two modes with identical training output.

Staged mode materializes every stage boundary (cleaned views, joined
table, extracted table, merged table) as column-store files and reads
them back, which is what the intermediate-byte accounting measures.
Pipelined mode streams driver-view chunks through a bounded-queue thread
chain (clean, join, extract, merge) straight into mini-batch emission,
writing no intermediate bytes at all.  Both modes feed the same training
sink and must produce the same order-independent batch digest; that
equality is the correctness contract between them.
"""

from __future__ import annotations

import json
import queue
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

from .columnstore import (
    Column,
    ColumnBatch,
    Kind,
    ViewSchema,
    open_view,
    read_columns,
    schema_of,
    unwrap_u64,
    wrap_u64,
    write_view,
)
from .device import (
    DEFAULT_LAUNCH_OVERHEAD_US,
    BatchState,
    ExecContext,
    LaunchCostModel,
    NodeEvaluator,
    execute_plan,
    host_worker_count,
)
from .featureops import (
    MASK64,
    SLOT_MAX,
    DictTable,
    FeatureConfigError,
    FunctionRef,
    OperatorSpec,
    fnv1a64,
    load_dict_table,
    output_domains,
    register_operator,
)
from .mempool import create_pool
from .opgraph import (
    LayerPlan,
    OperatorDag,
    PlacementBudget,
    expand_call_graph,
    layer_schedule,
    place_operators,
)
from .viewpipe import (
    CleanConfigError,
    CleanCounters,
    CleanPolicy,
    JoinIndex,
    JoinSpec,
    JsonExtraction,
    check_unique_ids,
    clean_views,
    cleaned_schema,
    join_views,
    join_with_index,
    merge_features,
    parse_filter,
    validate_clean_policy,
)

PIPELINED = "pipelined"
STAGED = "staged"

DEFAULT_BATCH_SIZE = 512
DEFAULT_QUEUE_DEPTH = 4
DEFAULT_POOL_BYTES = 8 << 20
DEFAULT_BUDGET_BYTES = 64 << 10
DEFAULT_BANDWIDTH = 1e9


class ConfigError(ValueError):
    """The pipeline configuration is malformed or inconsistent."""


class StageError(RuntimeError):
    """A pipeline stage failed; carries the stage name and batch index."""

    def __init__(self, stage: str, batch_index: int | None, cause: BaseException):
        where = f"batch {batch_index}" if batch_index is not None else "whole input"
        super().__init__(f"stage {stage!r} failed at {where}: {cause}")
        self.stage = stage
        self.batch_index = batch_index
        self.__cause__ = cause


class EmitError(ValueError):
    """Mini-batch emission is missing a required column or value."""


class BatchInvariantError(ValueError):
    """A mini-batch violates its invariants at the sink."""


# -- configuration -----------------------------------------------------------


@dataclass(frozen=True)
class ViewSource:
    """One input view: file path, optional projection, and clean policy."""

    name: str
    path: Path
    columns: tuple[str, ...] | None
    policy: CleanPolicy


@dataclass(frozen=True)
class PipelineConfig:
    """Everything a run needs; see docs/pipeline_config.md for the file form."""

    views: tuple[ViewSource, ...]
    driver: str
    basic_path: Path
    operators: tuple[OperatorSpec, ...]
    tables: Mapping[str, DictTable]
    features: Mapping[str, int]
    join_keys: tuple[str, ...] = ()
    basic_columns: tuple[str, ...] | None = None
    batch_size: int = DEFAULT_BATCH_SIZE
    mode: str = PIPELINED
    staging_dir: Path | None = None
    workers: int | None = None
    queue_depth: int = DEFAULT_QUEUE_DEPTH
    device_budget_bytes: int | float = DEFAULT_BUDGET_BYTES
    pool_bytes: int = DEFAULT_POOL_BYTES
    lanes_per_group: int = 256
    work_groups: int = 8
    bandwidth_bytes_per_s: float = DEFAULT_BANDWIDTH
    per_launch_overhead_us: float = DEFAULT_LAUNCH_OVERHEAD_US
    fusion: str = "fused"
    instance_column: str = "instance_id"
    label_column: str = "label"

    def __post_init__(self):
        if not self.views:
            raise ConfigError("at least one view is required")
        names = [v.name for v in self.views]
        if len(set(names)) != len(names):
            raise ConfigError("view names must be unique")
        if self.driver not in names:
            raise ConfigError(f"driver view {self.driver!r} not among views")
        if len(self.views) > 1 and not self.join_keys:
            raise ConfigError("multiple views require join keys")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.mode not in (PIPELINED, STAGED):
            raise ConfigError(f"mode must be {PIPELINED!r} or {STAGED!r}")
        if self.queue_depth < 1:
            raise ConfigError("queue_depth must be >= 1")
        if self.workers is not None and self.workers < 1:
            raise ConfigError("workers must be >= 1")
        if self.pool_bytes <= 0 or self.pool_bytes % 128 != 0:
            raise ConfigError("pool_bytes must be a positive multiple of 128")
        for col, slot in self.features.items():
            if not 0 <= slot <= SLOT_MAX:
                raise ConfigError(f"feature {col!r}: slot {slot} outside u16")


def _req(obj: Mapping, key: str, where: str):
    if key not in obj:
        raise ConfigError(f"{where}: missing required key {key!r}")
    return obj[key]


def _resolve(base: Path, p: str) -> Path:
    path = Path(p)
    return path if path.is_absolute() else base / path


def _load_function_ref(
    raw: Mapping, where: str, tables: Mapping[str, DictTable]
) -> FunctionRef:
    spec = _req(raw, "fn", where)
    footprint = raw.get("footprint_bytes")
    if footprint is None and isinstance(spec, str) and spec.startswith("lookup:"):
        table = spec.partition(":")[2]
        if table in tables:
            footprint = tables[table].size_bytes
    kind = raw.get("kind", "compute-bound")
    try:
        return FunctionRef(
            spec=spec,
            arg=raw.get("arg"),
            footprint_bytes=64 if footprint is None else int(footprint),
            kind=kind,
        )
    except FeatureConfigError as exc:
        raise ConfigError(f"{where}: {exc}") from exc


def load_config(path: str | Path) -> PipelineConfig:
    """Parse a JSON pipeline config; paths resolve relative to the file."""
    path = Path(path)
    try:
        raw = json.loads(path.read_text(encoding="utf-8"))
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc
    if not isinstance(raw, dict):
        raise ConfigError("config root must be an object")
    base = path.parent

    tables: dict[str, DictTable] = {}
    for name, t in raw.get("tables", {}).items():
        try:
            tables[name] = load_dict_table(
                _resolve(base, _req(t, "path", f"table {name!r}")),
                default=t.get("default", 0),
                size_bytes=t.get("size_bytes"),
            )
        except (OSError, ValueError) as exc:
            if isinstance(exc, ConfigError):
                raise
            raise ConfigError(f"table {name!r}: {exc}") from exc

    views = []
    for v in _req(raw, "views", "config"):
        name = _req(v, "name", "view")
        where = f"view {name!r}"
        clean = v.get("clean", {})
        extractions = []
        for e in clean.get("extract", ()):
            try:
                extractions.append(
                    JsonExtraction(
                        source=_req(e, "source", where),
                        path=_req(e, "path", where),
                        output=_req(e, "output", where),
                        kind=Kind.from_name(_req(e, "kind", where)),
                    )
                )
            except (ValueError, CleanConfigError) as exc:
                if isinstance(exc, ConfigError):
                    raise
                raise ConfigError(f"{where}: {exc}") from exc
        filt = clean.get("filter")
        try:
            policy = CleanPolicy(
                fills=dict(clean.get("fills", {})),
                extractions=tuple(extractions),
                filter=parse_filter(filt) if filt else None,
            )
        except CleanConfigError as exc:
            raise ConfigError(f"{where}: {exc}") from exc
        columns = v.get("columns")
        views.append(
            ViewSource(
                name=name,
                path=_resolve(base, _req(v, "path", where)),
                columns=tuple(columns) if columns is not None else None,
                policy=policy,
            )
        )

    operators: list[OperatorSpec] = []
    registry: dict[str, OperatorSpec] = {}
    for o in raw.get("operators", ()):
        name = _req(o, "name", "operator")
        where = f"operator {name!r}"
        try:
            spec = OperatorSpec(
                name=name,
                inputs=tuple(_req(o, "inputs", where)),
                outputs=tuple(_req(o, "outputs", where)),
                body=_load_function_ref(_req(o, "body", where), where, tables),
                pre_calls=tuple(
                    _load_function_ref(p, where, tables) for p in o.get("pre", ())
                ),
                post_calls=tuple(
                    _load_function_ref(p, where, tables) for p in o.get("post", ())
                ),
                footprint_bytes=int(o.get("footprint_bytes", 64)),
                kind=o.get("kind", "compute-bound"),
            )
            register_operator(spec, registry)
        except FeatureConfigError as exc:
            raise ConfigError(f"{where}: {exc}") from exc
        operators.append(spec)

    emit = raw.get("emit", {})
    features = {str(c): int(s) for c, s in emit.get("features", {}).items()}

    basic = _req(raw, "basic", "config")
    device = raw.get("device", {})
    staging = raw.get("staging_dir")
    join = raw.get("join", {})
    try:
        return PipelineConfig(
            views=tuple(views),
            driver=_req(raw, "driver", "config"),
            basic_path=_resolve(base, _req(basic, "path", "basic")),
            basic_columns=(
                tuple(basic["columns"]) if basic.get("columns") is not None else None
            ),
            join_keys=tuple(join.get("keys", ())),
            operators=tuple(operators),
            tables=tables,
            features=features,
            batch_size=int(raw.get("batch_size", DEFAULT_BATCH_SIZE)),
            mode=raw.get("mode", PIPELINED),
            staging_dir=_resolve(base, staging) if staging else None,
            workers=(int(raw["workers"]) if raw.get("workers") is not None else None),
            queue_depth=int(raw.get("queue_depth", DEFAULT_QUEUE_DEPTH)),
            device_budget_bytes=device.get("budget_bytes", DEFAULT_BUDGET_BYTES),
            pool_bytes=int(device.get("pool_bytes", DEFAULT_POOL_BYTES)),
            lanes_per_group=int(device.get("lanes_per_group", 256)),
            work_groups=int(device.get("work_groups", 8)),
            bandwidth_bytes_per_s=float(
                device.get("bandwidth_bytes_per_s", DEFAULT_BANDWIDTH)
            ),
            per_launch_overhead_us=float(
                device.get("per_launch_overhead_us", DEFAULT_LAUNCH_OVERHEAD_US)
            ),
            fusion=device.get("fusion", "fused"),
            instance_column=raw.get("instance_column", "instance_id"),
            label_column=raw.get("label_column", "label"),
        )
    except (TypeError, ValueError) as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(f"config {path}: {exc}") from exc


# -- mini-batches, digests, and the training sink ----------------------------


@dataclass(frozen=True)
class MiniBatch:
    """Per-instance ids, 0/1 labels, and sorted deduplicated signs."""

    ids: tuple[int, ...]
    labels: tuple[int, ...]
    features: tuple[tuple[tuple[int, int], ...], ...]

    def validate(self) -> None:
        if not (len(self.ids) == len(self.labels) == len(self.features)):
            raise BatchInvariantError("ids, labels, features lengths differ")
        if len(set(self.ids)) != len(self.ids):
            raise BatchInvariantError("duplicate instance ids in one batch")
        for i, instance_id in enumerate(self.ids):
            if not 0 <= instance_id <= MASK64:
                raise BatchInvariantError(f"id {instance_id} outside u64")
            if self.labels[i] not in (0, 1):
                raise BatchInvariantError(f"label {self.labels[i]!r} not 0/1")
            signs = self.features[i]
            if list(signs) != sorted(set(signs)):
                raise BatchInvariantError("signs not sorted and deduplicated")

    def __len__(self) -> int:
        return len(self.ids)


def instance_digest(
    instance_id: int, label: int, signs: Sequence[tuple[int, int]]
) -> int:
    """64-bit digest of one instance: id, label, and its sorted signs."""
    message = instance_id.to_bytes(8, "little") + bytes([label & 1])
    for slot, sign in signs:
        message += slot.to_bytes(2, "little") + sign.to_bytes(8, "little")
    return fnv1a64(message)


def batch_digest(batch: MiniBatch) -> int:
    """XOR of instance digests: order-independent across batch boundaries."""
    d = 0
    for i in range(len(batch)):
        d ^= instance_digest(batch.ids[i], batch.labels[i], batch.features[i])
    return d


def emit_minibatch(
    columns: Mapping[str, Sequence],
    feature_slots: Mapping[str, int],
    instance_column: str = "instance_id",
    label_column: str = "label",
) -> MiniBatch:
    """Gather one batch: per-instance signs deduplicated and sorted.

    Feature values are u64 signs possibly stored two's-complement-wrapped;
    null feature values contribute nothing (a legal sparse row).
    """
    if label_column not in columns:
        raise EmitError(f"label column {label_column!r} missing")
    if instance_column not in columns:
        raise EmitError(f"instance column {instance_column!r} missing")
    for col in feature_slots:
        if col not in columns:
            raise EmitError(f"feature column {col!r} missing")
    ids_raw = columns[instance_column]
    labels_raw = columns[label_column]
    n = len(ids_raw)
    ids = []
    labels = []
    features = []
    for i in range(n):
        raw_id = ids_raw[i]
        if raw_id is None:
            raise EmitError("null instance id at emission")
        ids.append(unwrap_u64(int(raw_id)))
        label = labels_raw[i]
        if label is None:
            raise EmitError("null label at emission")
        labels.append(int(label))
        signs = set()
        for col, slot in feature_slots.items():
            v = columns[col][i]
            if v is None:
                continue
            signs.add((slot, unwrap_u64(int(v))))
        features.append(tuple(sorted(signs)))
    return MiniBatch(tuple(ids), tuple(labels), tuple(features))


@dataclass
class TrainingSink:
    """Stand-in for the trainer: validates batches and accumulates stats."""

    batches: int = 0
    instances: int = 0
    signs: int = 0
    digest: int = 0

    def consume(self, batch: MiniBatch) -> "TrainingSink":
        batch.validate()
        self.batches += 1
        self.instances += len(batch)
        self.signs += sum(len(f) for f in batch.features)
        self.digest ^= batch_digest(batch)
        return self


def sink_consume(sink: TrainingSink, batch: MiniBatch) -> TrainingSink:
    return sink.consume(batch)


# -- run reports --------------------------------------------------------------


@dataclass
class RunReport:
    """Timing, launch, and I/O accounting for one pipeline run."""

    mode: str
    digest: int
    batches: int
    instances: int
    signs: int
    launches: int
    overhead_us: float
    bytes_h2d: int
    transfer_seconds: float
    intermediate_bytes_written: int
    intermediate_files: tuple[str, ...]
    rows_dropped: int
    rows_filtered: int
    batch_size: int
    workers: int
    wall_seconds: float
    stage_seconds: dict[str, float] = field(default_factory=dict)

    def to_text(self) -> str:
        lines = [
            f"== run report ({self.mode}) ==",
            f"batches emitted: {self.batches} x batch_size {self.batch_size}",
            f"instances: {self.instances} ({self.rows_dropped} dropped malformed, "
            f"{self.rows_filtered} filtered)",
            f"feature signs: {self.signs}",
            f"device launches: {self.launches} "
            f"(simulated overhead {self.overhead_us:.3f} us)",
            f"h2d transfers: {self.bytes_h2d} bytes "
            f"({self.transfer_seconds:.9f} s simulated)",
            f"intermediate bytes written: {self.intermediate_bytes_written}",
        ]
        if self.intermediate_files:
            lines.append(
                "intermediate files: " + ", ".join(self.intermediate_files)
            )
        for stage in sorted(self.stage_seconds):
            lines.append(f"stage {stage}: {self.stage_seconds[stage]:.3f} s")
        lines.append(f"wall: {self.wall_seconds:.3f} s on {self.workers} worker(s)")
        lines.append(f"batch digest: 0x{self.digest:016x}")
        lines.append("")
        lines.append("[report]")
        kv = {
            "mode": self.mode,
            "digest": f"0x{self.digest:016x}",
            "batches": self.batches,
            "instances": self.instances,
            "signs": self.signs,
            "launches": self.launches,
            "overhead_us": f"{self.overhead_us:.3f}",
            "bytes_h2d": self.bytes_h2d,
            "transfer_seconds": f"{self.transfer_seconds:.9f}",
            "intermediate_bytes": self.intermediate_bytes_written,
            "rows_dropped": self.rows_dropped,
            "rows_filtered": self.rows_filtered,
            "batch_size": self.batch_size,
            "workers": self.workers,
            "wall_seconds": f"{self.wall_seconds:.3f}",
        }
        for stage in sorted(self.stage_seconds):
            kv[f"stage_{stage}_s"] = f"{self.stage_seconds[stage]:.3f}"
        lines.extend(f"{k}={v}" for k, v in kv.items())
        return "\n".join(lines)


def parse_report_block(text: str) -> dict[str, str]:
    """Read the machine key=value block out of a rendered report."""
    out = {}
    seen = False
    for line in text.splitlines():
        if line.strip() == "[report]":
            seen = True
            continue
        if seen and "=" in line:
            k, _, v = line.partition("=")
            out[k.strip()] = v.strip()
    return out


# -- preparation shared by both modes -----------------------------------------


@dataclass
class _Prepared:
    config: PipelineConfig
    cost_model: LaunchCostModel
    dag: OperatorDag
    plan: LayerPlan
    evaluator: NodeEvaluator
    joined_names: tuple[str, ...]
    extract_outputs: tuple[tuple[str, Kind, str], ...]  # (column, kind, domain)


def _projected_schema(schema: ViewSchema, wanted: tuple[str, ...] | None, where: str):
    if wanted is None:
        return schema
    missing = set(wanted) - set(schema.names)
    if missing:
        raise ConfigError(f"{where}: columns {sorted(missing)} not in file")
    cols = tuple((n, k) for n, k in schema.columns if n in set(wanted))
    keys = tuple(k for k in schema.key_columns if k in set(wanted))
    return ViewSchema(cols, keys, 0)


def prepare(config: PipelineConfig) -> _Prepared:
    """Validate the config against the on-disk schemas and build the plan."""
    cleaned: dict[str, ViewSchema] = {}
    for view in config.views:
        try:
            schema = schema_of(view.path)
        except OSError as exc:
            raise ConfigError(f"view {view.name!r}: cannot open: {exc}") from exc
        schema = _projected_schema(schema, view.columns, f"view {view.name!r}")
        try:
            validate_clean_policy(schema, view.policy)
        except (CleanConfigError, KeyError) as exc:
            raise ConfigError(f"view {view.name!r}: {exc}") from exc
        cleaned[view.name] = cleaned_schema(schema, view.policy)

    driver_schema = cleaned[config.driver]
    for col in (config.instance_column, config.label_column):
        if col not in driver_schema.names:
            raise ConfigError(f"driver view lacks required column {col!r}")
        if driver_schema.kind_of(col) is not Kind.INT64:
            raise ConfigError(f"column {col!r} must be Int64")

    joined_cols = list(driver_schema.columns)
    joined_names = set(driver_schema.names)
    for view in config.views:
        if view.name == config.driver:
            continue
        side = cleaned[view.name]
        for key in config.join_keys:
            if key not in joined_names or key not in side.names:
                raise ConfigError(f"join key {key!r} missing from an input view")
            if driver_schema.kind_of(key) is not side.kind_of(key):
                raise ConfigError(f"join key {key!r}: kind mismatch across views")
        for name, kind in side.columns:
            if name in config.join_keys:
                continue
            if name in joined_names:
                raise ConfigError(
                    f"column {name!r} appears in two views; project or rename"
                )
            joined_cols.append((name, kind))
            joined_names.add(name)

    try:
        dag = expand_call_graph(config.operators)
        plan = place_operators(
            layer_schedule(dag), PlacementBudget(config.device_budget_bytes), dag
        )
        evaluator = NodeEvaluator(
            dag, {s.name: s for s in config.operators}, config.tables
        )
    except (FeatureConfigError, ValueError) as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(str(exc)) from exc

    missing = set(dag.external_inputs()) - joined_names
    if missing:
        raise ConfigError(
            f"operator inputs {sorted(missing)} not present after the join"
        )
    for node in dag.nodes:
        if node in joined_names:
            raise ConfigError(
                f"operator node {node!r} collides with a table column name"
            )

    extract_outputs = []
    produced = set()
    for spec in config.operators:
        domains = output_domains(spec, config.tables)
        for col in spec.outputs:
            if col in joined_names:
                raise ConfigError(
                    f"output column {col!r} collides with a table column"
                )
            domain = domains[col]
            kind = Kind.INT64 if domain == "u64" else Kind.UTF8
            extract_outputs.append((col, kind, domain))
            produced.add(col)

    try:
        basic_schema = schema_of(config.basic_path)
    except OSError as exc:
        raise ConfigError(f"basic features: cannot open: {exc}") from exc
    basic_schema = _projected_schema(basic_schema, config.basic_columns, "basic")
    if config.instance_column not in basic_schema.names:
        raise ConfigError(
            f"basic features lack instance column {config.instance_column!r}"
        )
    merged_names = joined_names | produced | set(basic_schema.names)
    basic_overlap = (
        (set(basic_schema.names) - {config.instance_column})
        & (joined_names | produced)
    )
    if basic_overlap:
        raise ConfigError(
            f"basic columns {sorted(basic_overlap)} collide with pipeline columns"
        )

    domains = {col: dom for col, _, dom in extract_outputs}
    for col, slot in config.features.items():
        if col not in merged_names:
            raise ConfigError(f"feature column {col!r} not in the merged table")
        if col in domains:
            if domains[col] != "u64":
                raise ConfigError(f"feature column {col!r} is not sign-valued")
        else:
            base_kind = None
            if col in basic_schema.names:
                base_kind = basic_schema.kind_of(col)
            else:
                for name, kind in joined_cols:
                    if name == col:
                        base_kind = kind
            if base_kind is not Kind.INT64:
                raise ConfigError(f"feature column {col!r} must be Int64")

    return _Prepared(
        config=config,
        cost_model=LaunchCostModel(config.per_launch_overhead_us),
        dag=dag,
        plan=plan,
        evaluator=evaluator,
        joined_names=tuple(sorted(joined_names)),
        extract_outputs=tuple(extract_outputs),
    )


def _make_ctx(prepared: _Prepared) -> ExecContext:
    config = prepared.config
    try:
        workers = host_worker_count(config.workers)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    return ExecContext(
        cost_model=prepared.cost_model,
        pool=create_pool(config.pool_bytes),
        work_groups=config.work_groups,
        lanes_per_group=config.lanes_per_group,
        host_workers=workers,
        bandwidth_bytes_per_s=config.bandwidth_bytes_per_s,
        fusion=config.fusion,
    )


def _batch_vectors(batch: ColumnBatch) -> dict[str, list]:
    return {name: batch.columns[name].to_pylist() for name in batch.schema.names}


def _extract_batch(
    table: ColumnBatch, prepared: _Prepared, ctx: ExecContext
) -> ColumnBatch:
    """Run the extraction plan over one table chunk; append output columns."""
    state = BatchState(_batch_vectors(table), prepared.dag.col_producer)
    execute_plan(ctx, prepared.plan, prepared.dag, state, prepared.evaluator)
    out = state.output_columns()

    spec = list(table.schema.columns)
    columns = dict(table.columns)
    for col, kind, domain in prepared.extract_outputs:
        vec = out[col]
        if domain == "u64":
            vec = [None if v is None else wrap_u64(v) for v in vec]
        spec.append((col, kind))
        columns[col] = Column.build(kind, vec)
    schema = ViewSchema(
        tuple(spec), table.schema.key_columns, table.schema.row_count
    )
    return ColumnBatch(schema, columns)


class _Emitter:
    """Accumulates merged rows and flushes fixed-size mini-batches."""

    def __init__(self, prepared: _Prepared, sink: TrainingSink):
        self.config = prepared.config
        self.sink = sink
        self.buffer: dict[str, list] | None = None

    def add(self, batch: ColumnBatch) -> None:
        vectors = _batch_vectors(batch)
        if self.buffer is None:
            self.buffer = {k: list(v) for k, v in vectors.items()}
        else:
            for k, v in vectors.items():
                self.buffer[k].extend(v)
        self._flush(self.config.batch_size)

    def finish(self) -> None:
        self._flush(1)

    def _rows(self) -> int:
        if not self.buffer:
            return 0
        return len(next(iter(self.buffer.values())))

    def _flush(self, minimum: int) -> None:
        while self._rows() >= max(minimum, 1):
            take = min(self.config.batch_size, self._rows())
            head = {k: v[:take] for k, v in self.buffer.items()}
            for v in self.buffer.values():
                del v[:take]
            batch = emit_minibatch(
                head,
                self.config.features,
                self.config.instance_column,
                self.config.label_column,
            )
            self.sink.consume(batch)


# -- staged mode ---------------------------------------------------------------


def run_staged(config: PipelineConfig) -> RunReport:
    """Run every stage to completion, materializing each boundary to disk."""
    prepared = prepare(config)
    if config.staging_dir is None:
        raise ConfigError("staged mode requires staging_dir")
    staging = config.staging_dir
    staging.mkdir(parents=True, exist_ok=True)

    counters = CleanCounters()
    sink = TrainingSink()
    stage_seconds: dict[str, float] = {}
    files: list[Path] = []
    wall0 = time.perf_counter()
    sides = [v for v in config.views if v.name != config.driver]

    def timed(stage: str, fn, *args):
        t0 = time.perf_counter()
        try:
            return fn(*args)
        except (ConfigError, StageError):
            raise
        except Exception as exc:
            raise StageError(stage, None, exc) from exc
        finally:
            stage_seconds[stage] = stage_seconds.get(stage, 0.0) + (
                time.perf_counter() - t0
            )

    with _make_ctx(prepared) as ctx:

        def stage_clean() -> dict[str, Path]:
            out = {}
            for view in config.views:
                batch, _ = read_columns(open_view(view.path), view.columns)
                cleanedb = clean_views(batch, view.policy, counters)
                dest = staging / f"cleaned_{view.name}.fbxc"
                write_view(cleanedb, dest)
                files.append(dest)
                out[view.name] = dest
            return out

        cleaned_paths = timed("clean", stage_clean)

        def stage_join() -> Path:
            acc, _ = read_columns(open_view(cleaned_paths[config.driver]))
            spec = JoinSpec(config.join_keys)
            for side in sides:
                side_batch, _ = read_columns(open_view(cleaned_paths[side.name]))
                acc = join_views(acc, side_batch, spec)
            dest = staging / "joined.fbxc"
            write_view(acc, dest)
            files.append(dest)
            return dest

        table_path = timed("join", stage_join) if sides else cleaned_paths[config.driver]

        def stage_extract() -> Path:
            table, _ = read_columns(open_view(table_path))
            extracted = _extract_batch(table, prepared, ctx)
            dest = staging / "extracted.fbxc"
            write_view(extracted, dest)
            files.append(dest)
            return dest

        extracted_path = timed("extract", stage_extract)

        def stage_merge() -> Path:
            extracted, _ = read_columns(open_view(extracted_path))
            basic, _ = read_columns(open_view(config.basic_path), config.basic_columns)
            merged = merge_features(extracted, basic, config.instance_column)
            dest = staging / "merged.fbxc"
            write_view(merged, dest)
            files.append(dest)
            return dest

        merged_path = timed("merge", stage_merge)

        def stage_emit() -> None:
            merged, _ = read_columns(open_view(merged_path))
            vectors = _batch_vectors(merged)
            n = merged.row_count
            for lo in range(0, n, config.batch_size):
                head = {k: v[lo : lo + config.batch_size] for k, v in vectors.items()}
                batch = emit_minibatch(
                    head,
                    config.features,
                    config.instance_column,
                    config.label_column,
                )
                sink.consume(batch)

        timed("emit", stage_emit)

    intermediate = sum(f.stat().st_size for f in files)
    return RunReport(
        mode=STAGED,
        digest=sink.digest,
        batches=sink.batches,
        instances=sink.instances,
        signs=sink.signs,
        launches=ctx.launches,
        overhead_us=ctx.overhead_us,
        bytes_h2d=ctx.bytes_h2d,
        transfer_seconds=ctx.transfer_seconds,
        intermediate_bytes_written=intermediate,
        intermediate_files=tuple(sorted(f.name for f in files)),
        rows_dropped=counters.malformed_rows,
        rows_filtered=counters.filtered_rows,
        batch_size=config.batch_size,
        workers=ctx.host_workers,
        wall_seconds=time.perf_counter() - wall0,
        stage_seconds=stage_seconds,
    )


# -- pipelined mode ------------------------------------------------------------


class _EOS:
    pass


_EOS_TOKEN = _EOS()


@dataclass
class _Failure:
    stage: str
    batch_index: int | None
    cause: BaseException


def _pump(
    name: str,
    in_q: "queue.Queue",
    out_q: "queue.Queue",
    fn,
    stage_seconds: dict[str, float],
    cancel: threading.Event,
) -> None:
    """Move items downstream, transforming each; fail fast, drain cleanly."""
    failed = False
    while True:
        item = in_q.get()
        if item is _EOS_TOKEN:
            out_q.put(_EOS_TOKEN)
            return
        if isinstance(item, _Failure):
            out_q.put(item)
            failed = True
            continue
        if failed or cancel.is_set():
            continue  # draining after a failure elsewhere
        index, payload = item
        t0 = time.perf_counter()
        try:
            result = fn(payload)
        except Exception as exc:
            cancel.set()
            out_q.put(_Failure(name, index, exc))
            failed = True
            continue
        finally:
            stage_seconds[name] = stage_seconds.get(name, 0.0) + (
                time.perf_counter() - t0
            )
        out_q.put((index, result))


def run_pipelined(config: PipelineConfig) -> RunReport:
    """Stream driver chunks through clean/join/extract/merge into the sink.

    Side views are cleaned once and indexed; basic features are indexed
    once; the driver view is read in batch_size row ranges and each chunk
    flows through the stage chain.  Nothing is written to disk.
    """
    prepared = prepare(config)
    counters = CleanCounters()
    sink = TrainingSink()
    stage_seconds: dict[str, float] = {}
    wall0 = time.perf_counter()

    driver_view = next(v for v in config.views if v.name == config.driver)
    sides = [v for v in config.views if v.name != config.driver]

    with _make_ctx(prepared) as ctx:
        t0 = time.perf_counter()
        try:
            side_indexes = []
            for side in sides:
                batch, _ = read_columns(open_view(side.path), side.columns)
                cleanedb = clean_views(batch, side.policy, counters)
                side_indexes.append(JoinIndex(cleanedb, JoinSpec(config.join_keys)))
            basic_batch, _ = read_columns(
                open_view(config.basic_path), config.basic_columns
            )
            check_unique_ids(basic_batch, config.instance_column, "basic features")
            basic_index = JoinIndex(basic_batch, JoinSpec((config.instance_column,)))
            driver_file = open_view(driver_view.path)
        except Exception as exc:
            raise StageError("prepare", None, exc) from exc
        stage_seconds["prepare"] = time.perf_counter() - t0

        cancel = threading.Event()
        depth = config.queue_depth
        queues = [queue.Queue(maxsize=depth) for _ in range(4)]

        def read_driver() -> None:
            n = driver_file.schema.row_count
            index = 0
            try:
                for lo in range(0, n, config.batch_size):
                    if cancel.is_set():
                        break
                    t = time.perf_counter()
                    chunk, _ = read_columns(
                        driver_file,
                        driver_view.columns,
                        (lo, min(lo + config.batch_size, n)),
                    )
                    stage_seconds["read"] = stage_seconds.get("read", 0.0) + (
                        time.perf_counter() - t
                    )
                    queues[0].put((index, chunk))
                    index += 1
            except Exception as exc:
                cancel.set()
                queues[0].put(_Failure("read", index, exc))
            queues[0].put(_EOS_TOKEN)

        def do_clean(chunk: ColumnBatch) -> ColumnBatch:
            return clean_views(chunk, driver_view.policy, counters)

        def do_join(chunk: ColumnBatch) -> ColumnBatch:
            for index in side_indexes:
                chunk = join_with_index(chunk, index)
            return chunk

        def do_extract(chunk: ColumnBatch) -> ColumnBatch:
            return _extract_batch(chunk, prepared, ctx)

        threads = [
            threading.Thread(target=read_driver, name="fb-read", daemon=True),
            threading.Thread(
                target=_pump,
                args=("clean", queues[0], queues[1], do_clean, stage_seconds, cancel),
                name="fb-clean",
                daemon=True,
            ),
            threading.Thread(
                target=_pump,
                args=("join", queues[1], queues[2], do_join, stage_seconds, cancel),
                name="fb-join",
                daemon=True,
            ),
            threading.Thread(
                target=_pump,
                args=(
                    "extract",
                    queues[2],
                    queues[3],
                    do_extract,
                    stage_seconds,
                    cancel,
                ),
                name="fb-extract",
                daemon=True,
            ),
        ]
        for t in threads:
            t.start()

        emitter = _Emitter(prepared, sink)
        seen_ids: set[int] = set()
        failure: _Failure | None = None
        while True:
            item = queues[3].get()
            if item is _EOS_TOKEN:
                break
            if isinstance(item, _Failure):
                failure = failure or item
                cancel.set()
                continue
            if failure is not None:
                continue
            index, extracted = item
            t0 = time.perf_counter()
            try:
                check_unique_ids(
                    extracted, config.instance_column, "extracted features", seen_ids
                )
                merged = join_with_index(extracted, basic_index)
                emitter.add(merged)
            except Exception as exc:
                failure = _Failure("merge", index, exc)
                cancel.set()
            finally:
                stage_seconds["merge"] = stage_seconds.get("merge", 0.0) + (
                    time.perf_counter() - t0
                )
        for t in threads:
            t.join()
        if failure is not None:
            raise StageError(failure.stage, failure.batch_index, failure.cause)
        t0 = time.perf_counter()
        try:
            emitter.finish()
        except Exception as exc:
            raise StageError("emit", None, exc) from exc
        stage_seconds["emit"] = stage_seconds.get("emit", 0.0) + (
            time.perf_counter() - t0
        )

    return RunReport(
        mode=PIPELINED,
        digest=sink.digest,
        batches=sink.batches,
        instances=sink.instances,
        signs=sink.signs,
        launches=ctx.launches,
        overhead_us=ctx.overhead_us,
        bytes_h2d=ctx.bytes_h2d,
        transfer_seconds=ctx.transfer_seconds,
        intermediate_bytes_written=0,
        intermediate_files=(),
        rows_dropped=counters.malformed_rows,
        rows_filtered=counters.filtered_rows,
        batch_size=config.batch_size,
        workers=ctx.host_workers,
        wall_seconds=time.perf_counter() - wall0,
        stage_seconds=stage_seconds,
    )


def run_pipeline(config: PipelineConfig, mode: str | None = None) -> RunReport:
    """Dispatch to the configured (or overridden) execution mode."""
    effective = mode or config.mode
    if effective == STAGED:
        return run_staged(config)
    if effective == PIPELINED:
        return run_pipelined(config)
    raise ConfigError(f"unknown mode {effective!r}")
