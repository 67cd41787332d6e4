"""Relational view stages: cleaning, key joins, and basic-feature merge.

Cleaning fills declared nulls, extracts dot-path fields out of JSON
columns, drops rows whose JSON is unparseable (counted, never fatal), and
applies an optional row filter.  Joins are inner equi-joins with a
deterministic output order: sorted by canonical key bytes, then left row
index, then right row index, so independently computed joins of the same
inputs are bit-identical.  Merging extracted features with basic features
is the same join on the instance id, with uniqueness enforced.
"""

from __future__ import annotations

import json
import re
import struct
from dataclasses import dataclass, field
from typing import Mapping, Sequence

from .columnstore import (
    INT64_MAX,
    INT64_MIN,
    Column,
    ColumnBatch,
    Kind,
    ViewSchema,
    canon_f32,
)


class CleanConfigError(ValueError):
    """A clean policy references missing columns or mismatched kinds."""


class JoinConfigError(ValueError):
    """Join keys are absent, kind-mismatched, or columns would collide."""


class MergeUniquenessError(ValueError):
    """A merge side holds the same instance id more than once."""


@dataclass
class CleanCounters:
    """Row-drop accounting for one cleaning pass."""

    malformed_rows: int = 0
    filtered_rows: int = 0


# -- filter expressions ------------------------------------------------------

_TOKEN_RE = re.compile(
    r"\s*(?:(?P<num>-?\d+\.\d+|-?\d+)|(?P<ident>[A-Za-z_][A-Za-z0-9_]*)"
    r"|(?P<str>'[^']*'|\"[^\"]*\")|(?P<op>==|!=|<=|>=|<|>|&&|\|\||[()]))"
)

_COMPARE_OPS = ("==", "!=", "<", "<=", ">", ">=")


@dataclass(frozen=True)
class Comparison:
    """column <op> literal; any comparison against a null row is False."""

    column: str
    op: str
    literal: int | float | str


@dataclass(frozen=True)
class BoolExpr:
    kind: str  # "and" | "or"
    parts: tuple


FilterExpr = "Comparison | BoolExpr"


def _tokenize(text: str) -> list[tuple[str, str]]:
    tokens = []
    pos = 0
    while pos < len(text):
        m = _TOKEN_RE.match(text, pos)
        if not m or m.end() == pos:
            rest = text[pos:].strip()
            if not rest:
                break
            raise CleanConfigError(f"filter: cannot tokenize at {rest[:20]!r}")
        pos = m.end()
        if m.group("num") is not None:
            tokens.append(("num", m.group("num")))
        elif m.group("ident") is not None:
            word = m.group("ident")
            if word in ("and", "or"):
                tokens.append(("bool", word))
            else:
                tokens.append(("ident", word))
        elif m.group("str") is not None:
            tokens.append(("str", m.group("str")[1:-1]))
        else:
            op = m.group("op")
            if op == "&&":
                tokens.append(("bool", "and"))
            elif op == "||":
                tokens.append(("bool", "or"))
            else:
                tokens.append(("op", op))
    return tokens


class _Parser:
    def __init__(self, tokens: list[tuple[str, str]]):
        self.tokens = tokens
        self.pos = 0

    def peek(self) -> tuple[str, str] | None:
        return self.tokens[self.pos] if self.pos < len(self.tokens) else None

    def take(self) -> tuple[str, str]:
        tok = self.peek()
        if tok is None:
            raise CleanConfigError("filter: unexpected end of expression")
        self.pos += 1
        return tok

    def parse_or(self):
        parts = [self.parse_and()]
        while self.peek() == ("bool", "or"):
            self.take()
            parts.append(self.parse_and())
        return parts[0] if len(parts) == 1 else BoolExpr("or", tuple(parts))

    def parse_and(self):
        parts = [self.parse_atom()]
        while self.peek() == ("bool", "and"):
            self.take()
            parts.append(self.parse_atom())
        return parts[0] if len(parts) == 1 else BoolExpr("and", tuple(parts))

    def parse_atom(self):
        tok = self.take()
        if tok == ("op", "("):
            inner = self.parse_or()
            if self.take() != ("op", ")"):
                raise CleanConfigError("filter: expected ')'")
            return inner
        if tok[0] != "ident":
            raise CleanConfigError(f"filter: expected column name, got {tok[1]!r}")
        column = tok[1]
        op_tok = self.take()
        if op_tok[0] != "op" or op_tok[1] not in _COMPARE_OPS:
            raise CleanConfigError(f"filter: expected comparison after {column!r}")
        lit_tok = self.take()
        if lit_tok[0] == "num":
            text = lit_tok[1]
            literal: int | float | str = float(text) if "." in text else int(text)
        elif lit_tok[0] == "str":
            literal = lit_tok[1]
        else:
            raise CleanConfigError(f"filter: expected literal, got {lit_tok[1]!r}")
        return Comparison(column, op_tok[1], literal)


def parse_filter(text: str):
    """Parse a predicate: comparisons joined by and/or with parentheses."""
    parser = _Parser(_tokenize(text))
    expr = parser.parse_or()
    if parser.peek() is not None:
        raise CleanConfigError(
            f"filter: trailing tokens at {parser.peek()[1]!r}"
        )
    return expr


def bind_filter(expr, schema: ViewSchema):
    """Validate columns/literal kinds against a schema; canonicalize floats."""
    if isinstance(expr, BoolExpr):
        return BoolExpr(expr.kind, tuple(bind_filter(p, schema) for p in expr.parts))
    kind = schema.kind_of(expr.column)  # raises UnknownColumnError
    lit = expr.literal
    if kind in (Kind.UTF8, Kind.JSON):
        if not isinstance(lit, str):
            raise CleanConfigError(
                f"filter: column {expr.column!r} is text, literal {lit!r} is not"
            )
    else:
        if isinstance(lit, str):
            raise CleanConfigError(
                f"filter: column {expr.column!r} is numeric, literal is text"
            )
        if kind is Kind.FLOAT32:
            lit = canon_f32(float(lit))
    return Comparison(expr.column, expr.op, lit)


def eval_filter(expr, columns: Mapping[str, Column], i: int) -> bool:
    if isinstance(expr, BoolExpr):
        if expr.kind == "and":
            return all(eval_filter(p, columns, i) for p in expr.parts)
        return any(eval_filter(p, columns, i) for p in expr.parts)
    value = columns[expr.column].get(i)
    if value is None:
        return False
    lit = expr.literal
    if expr.op == "==":
        return value == lit
    if expr.op == "!=":
        return value != lit
    if expr.op == "<":
        return value < lit
    if expr.op == "<=":
        return value <= lit
    if expr.op == ">":
        return value > lit
    return value >= lit


# -- cleaning ----------------------------------------------------------------


@dataclass(frozen=True)
class JsonExtraction:
    """Pull a dot-path leaf out of a JSON column into a typed column."""

    source: str
    path: str
    output: str
    kind: Kind

    def __post_init__(self):
        if not self.path or any(not p for p in self.path.split(".")):
            raise CleanConfigError(f"bad extraction path {self.path!r}")
        if not self.output:
            raise CleanConfigError("extraction output name must be non-empty")


@dataclass(frozen=True)
class CleanPolicy:
    """Null fills, JSON field extractions, and an optional row filter."""

    fills: Mapping[str, object] = field(default_factory=dict)
    extractions: tuple[JsonExtraction, ...] = ()
    filter: object | None = None  # parsed filter expression

    def __post_init__(self):
        outs = [e.output for e in self.extractions]
        if len(set(outs)) != len(outs):
            raise CleanConfigError("duplicate extraction output names")


_MISSING = object()


def _walk_path(obj, parts: Sequence[str]):
    cur = obj
    for p in parts:
        if isinstance(cur, dict) and p in cur:
            cur = cur[p]
        else:
            return _MISSING
    return cur


def _coerce_leaf(value, kind: Kind):
    if value is _MISSING or value is None:
        return None
    if kind is Kind.JSON:
        return json.dumps(value, sort_keys=True, separators=(",", ":"))
    if kind is Kind.UTF8:
        return value if isinstance(value, str) else None
    if isinstance(value, bool):
        return None
    if kind is Kind.INT64:
        if isinstance(value, int) and INT64_MIN <= value <= INT64_MAX:
            return value
        return None
    # Float32
    if isinstance(value, (int, float)):
        return canon_f32(float(value))
    return None


def _check_fill(column: str, kind: Kind, value) -> None:
    if isinstance(value, bool):
        raise CleanConfigError(f"fill for {column!r}: bool is not a column value")
    if kind is Kind.INT64 and isinstance(value, int):
        return
    if kind is Kind.FLOAT32 and isinstance(value, (int, float)):
        return
    if kind in (Kind.UTF8, Kind.JSON) and isinstance(value, str):
        return
    raise CleanConfigError(
        f"fill for {column!r}: {value!r} does not match kind {kind.name}"
    )


def validate_clean_policy(schema: ViewSchema, policy: CleanPolicy) -> None:
    """Static checks of a policy against a schema; raises CleanConfigError.

    An extraction output may share its name with an existing column only
    when the kinds agree (re-cleaning then recomputes that column in
    place), which keeps cleaning idempotent.
    """
    names = set(schema.names)
    for column, value in policy.fills.items():
        if column not in names:
            raise CleanConfigError(f"fill references unknown column {column!r}")
        _check_fill(column, schema.kind_of(column), value)
    for ext in policy.extractions:
        if ext.source not in names:
            raise CleanConfigError(f"extraction source {ext.source!r} unknown")
        if schema.kind_of(ext.source) is not Kind.JSON:
            raise CleanConfigError(f"extraction source {ext.source!r} is not Json")
        if ext.output in names and schema.kind_of(ext.output) is not ext.kind:
            raise CleanConfigError(
                f"extraction output {ext.output!r} collides with an existing "
                f"column of a different kind"
            )
    if policy.filter is not None:
        bind_filter(policy.filter, cleaned_schema(schema, policy))


def cleaned_schema(schema: ViewSchema, policy: CleanPolicy) -> ViewSchema:
    """Schema of clean_views output: inputs plus new extraction columns."""
    out = list(schema.columns)
    names = set(schema.names)
    for ext in policy.extractions:
        if ext.output not in names:
            out.append((ext.output, ext.kind))
            names.add(ext.output)
    return ViewSchema(tuple(out), schema.key_columns, 0)


def clean_views(
    batch: ColumnBatch,
    policy: CleanPolicy,
    counters: CleanCounters | None = None,
) -> ColumnBatch:
    """Fill nulls, extract JSON fields, drop unparseable rows, filter.

    Fill-covered columns come out with no null bits.  A row whose JSON
    source fails to parse is dropped and counted; a missing path or a
    wrong-typed leaf only nulls that extraction output.  The filter runs
    last, over filled and extracted values; survivor order is preserved.
    Re-cleaning a cleaned batch is a no-op: extraction outputs that
    already exist (same kind) are recomputed in place.
    """
    schema = batch.schema
    validate_clean_policy(schema, policy)

    n = batch.row_count
    # Parse each JSON source once; a malformed cell drops the whole row.
    parsed: dict[str, list] = {}
    dropped: set[int] = set()
    for source in {e.source for e in policy.extractions}:
        col = batch.columns[source]
        cells = []
        for i in range(n):
            raw = col.get(i)
            if raw is None:
                cells.append(_MISSING)
                continue
            try:
                cells.append(json.loads(raw))
            except json.JSONDecodeError:
                cells.append(_MISSING)
                dropped.add(i)
        parsed[source] = cells
    if counters is not None:
        counters.malformed_rows += len(dropped)

    kept = [i for i in range(n) if i not in dropped]

    filled: dict[str, list] = {}
    for name, kind in schema.columns:
        col = batch.columns[name]
        fill = policy.fills.get(name, _MISSING)
        if fill is _MISSING:
            filled[name] = [col.get(i) for i in kept]
        else:
            if kind is Kind.FLOAT32:
                fill = canon_f32(float(fill))
            values = col
            filled[name] = [
                fill if (v := values.get(i)) is None else v for i in kept
            ]

    extracted: dict[str, list] = {}
    for ext in policy.extractions:
        parts = ext.path.split(".")
        cells = parsed[ext.source]
        extracted[ext.output] = [
            _coerce_leaf(_walk_path(cells[i], parts), ext.kind)
            if cells[i] is not _MISSING
            else None
            for i in kept
        ]

    out_spec: list[tuple[str, Kind]] = []
    out_values: dict[str, list] = {}
    for name, kind in schema.columns:
        out_spec.append((name, kind))
        out_values[name] = extracted.pop(name, filled[name])
    for ext in policy.extractions:
        if ext.output in extracted:
            out_spec.append((ext.output, ext.kind))
            out_values[ext.output] = extracted[ext.output]

    if policy.filter is not None:
        probe_schema = ViewSchema(tuple(out_spec), schema.key_columns, len(kept))
        bound = bind_filter(policy.filter, probe_schema)
        probe_cols = {
            name: Column.build(kind, out_values[name]) for name, kind in out_spec
        }
        survivors = [
            j for j in range(len(kept)) if eval_filter(bound, probe_cols, j)
        ]
        if counters is not None:
            counters.filtered_rows += len(kept) - len(survivors)
        out_values = {
            name: [vals[j] for j in survivors] for name, vals in out_values.items()
        }
        row_count = len(survivors)
    else:
        row_count = len(kept)

    out_schema = ViewSchema(tuple(out_spec), schema.key_columns, row_count)
    columns = {
        name: Column.build(kind, out_values[name]) for name, kind in out_spec
    }
    return ColumnBatch(out_schema, columns)


# -- joins -------------------------------------------------------------------


@dataclass(frozen=True)
class JoinSpec:
    """Inner equi-join on an ordered list of shared key columns."""

    keys: tuple[str, ...]
    kind: str = "inner"

    def __post_init__(self):
        if not self.keys:
            raise JoinConfigError("join needs at least one key column")
        if self.kind != "inner":
            raise JoinConfigError(f"unsupported join kind {self.kind!r}")


def join_key_bytes(kind: Kind, value) -> bytes:
    """Canonical key image: kind tag ++ u32 length ++ big-endian payload."""
    if kind is Kind.INT64:
        payload = struct.pack(">q", value)
    elif kind is Kind.FLOAT32:
        payload = struct.pack(">f", value)
    else:
        payload = value.encode("utf-8")
    return bytes([kind.value]) + struct.pack(">I", len(payload)) + payload


def _row_key(batch: ColumnBatch, keys: Sequence[str], i: int) -> bytes | None:
    """Key bytes for one row; None when any key value is null (no match)."""
    parts = []
    for key in keys:
        v = batch.columns[key].get(i)
        if v is None:
            return None
        parts.append(join_key_bytes(batch.schema.kind_of(key), v))
    return b"".join(parts)


def _check_join_inputs(
    left: ColumnBatch, right: ColumnBatch, spec: JoinSpec
) -> tuple[tuple[str, Kind], ...]:
    for key in spec.keys:
        if key not in left.schema.names or key not in right.schema.names:
            raise JoinConfigError(f"join key {key!r} missing from an input")
        lk, rk = left.schema.kind_of(key), right.schema.kind_of(key)
        if lk is not rk:
            raise JoinConfigError(
                f"join key {key!r}: kind {lk.name} vs {rk.name}"
            )
    right_cols = tuple(
        (name, kind)
        for name, kind in right.schema.columns
        if name not in spec.keys
    )
    collisions = {n for n, _ in right_cols} & set(left.schema.names)
    if collisions:
        raise JoinConfigError(
            f"join would duplicate columns {sorted(collisions)}; "
            f"rename before joining"
        )
    return right_cols


class JoinIndex:
    """Hash index over one side's key columns, reusable across probes."""

    def __init__(self, batch: ColumnBatch, spec: JoinSpec):
        for key in spec.keys:
            if key not in batch.schema.names:
                raise JoinConfigError(f"join key {key!r} missing from input")
        self.batch = batch
        self.spec = spec
        self.rows: dict[bytes, list[int]] = {}
        for i in range(batch.row_count):
            kb = _row_key(batch, spec.keys, i)
            if kb is not None:
                self.rows.setdefault(kb, []).append(i)


def _materialize_join(
    left: ColumnBatch,
    right: ColumnBatch,
    spec: JoinSpec,
    matches: list[tuple[bytes, int, int]],
) -> ColumnBatch:
    right_cols = _check_join_inputs(left, right, spec)
    matches.sort()
    left_idx = [li for _, li, _ in matches]
    right_idx = [ri for _, _, ri in matches]

    out_spec = tuple(left.schema.columns) + right_cols
    columns: dict[str, Column] = {}
    for name, kind in left.schema.columns:
        src = left.columns[name]
        columns[name] = Column.build(kind, (src.get(i) for i in left_idx))
    for name, kind in right_cols:
        src = right.columns[name]
        columns[name] = Column.build(kind, (src.get(i) for i in right_idx))
    schema = ViewSchema(out_spec, spec.keys, len(matches))
    return ColumnBatch(schema, columns)


def join_with_index(left: ColumnBatch, index: JoinIndex) -> ColumnBatch:
    """Inner join of a probe batch against a prebuilt side index."""
    spec = index.spec
    matches: list[tuple[bytes, int, int]] = []
    for li in range(left.row_count):
        kb = _row_key(left, spec.keys, li)
        if kb is None:
            continue
        for ri in index.rows.get(kb, ()):
            matches.append((kb, li, ri))
    return _materialize_join(left, index.batch, spec, matches)


def join_views(
    left: ColumnBatch, right: ColumnBatch, spec: JoinSpec
) -> ColumnBatch:
    """Inner equi-join; output rows sorted by (key bytes, left idx, right idx).

    Output columns are the left columns followed by the right columns
    minus the keys.  Null key values never match.
    """
    _check_join_inputs(left, right, spec)
    return join_with_index(left, JoinIndex(right, spec))


def check_unique_ids(
    batch: ColumnBatch, column: str, side: str, seen: set | None = None
) -> None:
    """Enforce non-null uniqueness of an id column; raises on duplicates."""
    if column not in batch.schema.names:
        raise JoinConfigError(f"{side}: missing id column {column!r}")
    ids = seen if seen is not None else set()
    col = batch.columns[column]
    for i in range(batch.row_count):
        v = col.get(i)
        if v is None:
            continue
        if v in ids:
            raise MergeUniquenessError(f"{side}: duplicate instance id {v}")
        ids.add(v)


def merge_features(
    extracted: ColumnBatch,
    basic: ColumnBatch,
    instance_column: str = "instance_id",
) -> ColumnBatch:
    """Join extracted features with basic features on the instance id.

    Both sides must hold each id at most once, so every extracted row with
    a matching basic row appears exactly once in the output.
    """
    check_unique_ids(extracted, instance_column, "extracted features")
    check_unique_ids(basic, instance_column, "basic features")
    return join_views(extracted, basic, JoinSpec((instance_column,)))
