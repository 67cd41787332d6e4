"""Feature-extraction operator library.

Operators declare input/output columns, a body function, and optional
pre/post function calls plus a memory-footprint estimate; the scheduler
expands each call into its own fine-granularity node and places it on the
host or the wide device by footprint.  The value-level primitives live
here: string splitting (device-side, arena-allocated), 64-bit FNV-1a
feature signing, and read-only dictionary lookup as the memory-bound
stand-in for embedding tables.
"""

from __future__ import annotations

import re
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Iterable, Mapping, Sequence

FNV_OFFSET = 0xCBF29CE484222325
FNV_PRIME = 0x100000001B3
MASK64 = (1 << 64) - 1

SLOT_MAX = 0xFFFF

COMPUTE_BOUND = "compute-bound"
MEMORY_BOUND = "memory-bound"
_KINDS = (COMPUTE_BOUND, MEMORY_BOUND)

_NAME_RE = re.compile(r"^[A-Za-z_][A-Za-z0-9_]*$")


class FeatureConfigError(ValueError):
    """An operator or function declaration is invalid."""


def fnv1a64(data: bytes | bytearray | memoryview) -> int:
    """64-bit FNV-1a over raw bytes (xor byte, then multiply, wrapping)."""
    h = FNV_OFFSET
    for b in data:
        h = ((h ^ b) * FNV_PRIME) & MASK64
    return h


@dataclass(frozen=True)
class FeatureSign:
    """A sparse feature: slot id plus the 64-bit sign of its value."""

    slot: int
    sign: int

    def __post_init__(self):
        if not 0 <= self.slot <= SLOT_MAX:
            raise ValueError(f"slot {self.slot} outside u16 range")
        if not 0 <= self.sign <= MASK64:
            raise ValueError("sign outside u64 range")


def hash_combine(values: Sequence[bytes], slot: int) -> FeatureSign:
    """Sign a value combination: FNV-1a over slot(u16 BE) ++ values.

    Values are joined with a single 0x00 separator, so the message for one
    value ``v`` at slot ``s`` is exactly ``s_hi s_lo v``.  Order-sensitive.
    """
    if not values:
        raise ValueError("hash_combine needs at least one value")
    if not 0 <= slot <= SLOT_MAX:
        raise ValueError(f"slot {slot} outside u16 range")
    message = slot.to_bytes(2, "big") + b"\x00".join(values)
    return FeatureSign(slot, fnv1a64(message))


def value_bytes(value) -> bytes:
    """Canonical byte image of a value for signing.

    Strings hash as UTF-8, ints as 8-byte big-endian two's complement,
    floats as 4-byte big-endian float32.
    """
    if isinstance(value, str):
        return value.encode("utf-8")
    if isinstance(value, bool):
        raise TypeError("bool is not a feature value")
    if isinstance(value, int):
        return (value & MASK64).to_bytes(8, "big")
    if isinstance(value, float):
        return struct.pack(">f", value)
    raise TypeError(f"cannot encode {type(value).__name__} for signing")


def split_string(s: str, delimiter: str) -> list[str]:
    """Split on a single-byte delimiter; k delimiters yield k+1 tokens.

    The empty string yields [""] so that joining the tokens with the
    delimiter always reproduces the input.
    """
    if len(delimiter) != 1 or len(delimiter.encode("utf-8")) != 1:
        raise ValueError("delimiter must be a single byte")
    return s.split(delimiter)


# -- dictionary tables (the memory-bound lookup path) -----------------------


@dataclass
class DictTable:
    """Read-only key -> u64 map with a default for absent keys."""

    entries: dict[str, int]
    default: int = 0
    size_bytes: int = 0

    def __post_init__(self):
        if not 0 <= self.default <= MASK64:
            raise ValueError("default outside u64 range")
        if self.size_bytes < 0:
            raise ValueError("size_bytes must be non-negative")

    def lookup(self, key: str) -> int:
        return self.entries.get(key, self.default)

    def __len__(self) -> int:
        return len(self.entries)


def load_dict_table(
    path: str | Path, default: int = 0, size_bytes: int | None = None
) -> DictTable:
    """Load a table from text lines of "key<TAB>u64".

    Blank lines are ignored.  ``size_bytes`` defaults to the file size; a
    larger declared size models a table that would not fit device memory.
    """
    path = Path(path)
    entries: dict[str, int] = {}
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\n")
            if not line:
                continue
            key, sep, value = line.partition("\t")
            if not sep:
                raise ValueError(f"{path}:{lineno}: expected key<TAB>u64")
            if key in entries:
                raise ValueError(f"{path}:{lineno}: duplicate key {key!r}")
            try:
                v = int(value)
            except ValueError:
                raise ValueError(f"{path}:{lineno}: bad u64 {value!r}") from None
            if not 0 <= v <= MASK64:
                raise ValueError(f"{path}:{lineno}: value outside u64 range")
            entries[key] = v
    if size_bytes is None:
        size_bytes = path.stat().st_size
    return DictTable(entries, default, size_bytes)


def dict_lookup(keys: Iterable, table: DictTable) -> list[int]:
    """Element-wise lookup; absent keys (None included) map to the default."""
    out = []
    for key in keys:
        if key is None:
            out.append(table.default)
            continue
        if isinstance(key, int):
            key = str(key)
        out.append(table.lookup(key))
    return out


# -- operator declarations ---------------------------------------------------


@dataclass(frozen=True)
class FunctionRef:
    """A named function call attached to an operator.

    ``spec`` selects a function from the library (see resolve_function).
    For pre-calls, ``arg`` is the input slot the call preprocesses; its
    result replaces that slot for the body.  ``footprint_bytes`` drives
    host/device placement of this call's own node.
    """

    spec: str
    arg: int | None = None
    footprint_bytes: int = 64
    kind: str = COMPUTE_BOUND

    def __post_init__(self):
        if not self.spec:
            raise FeatureConfigError("function spec must be non-empty")
        if self.footprint_bytes <= 0:
            raise FeatureConfigError("footprint_bytes must be positive")
        if self.kind not in _KINDS:
            raise FeatureConfigError(f"kind must be one of {_KINDS}")


@dataclass(frozen=True)
class OperatorSpec:
    """One feature-extraction operator and its call structure.

    With no post-calls the body's result is the single output column; with
    post-calls, post-call j independently transforms the body's result and
    writes output column j.
    """

    name: str
    inputs: tuple[str, ...]
    outputs: tuple[str, ...]
    body: FunctionRef
    pre_calls: tuple[FunctionRef, ...] = ()
    post_calls: tuple[FunctionRef, ...] = ()
    footprint_bytes: int = 64
    kind: str = COMPUTE_BOUND

    def __post_init__(self):
        if not _NAME_RE.match(self.name):
            raise FeatureConfigError(f"bad operator name {self.name!r}")
        if not self.inputs:
            raise FeatureConfigError(f"{self.name}: needs at least one input")
        if not self.outputs:
            raise FeatureConfigError(f"{self.name}: needs at least one output")
        expected = len(self.post_calls) if self.post_calls else 1
        if len(self.outputs) != expected:
            raise FeatureConfigError(
                f"{self.name}: {expected} output(s) expected for "
                f"{len(self.post_calls)} post-call(s), got {len(self.outputs)}"
            )
        if len(set(self.outputs)) != len(self.outputs):
            raise FeatureConfigError(f"{self.name}: duplicate output columns")
        if self.footprint_bytes <= 0:
            raise FeatureConfigError(f"{self.name}: footprint_bytes must be positive")
        if self.kind not in _KINDS:
            raise FeatureConfigError(f"{self.name}: kind must be one of {_KINDS}")
        if self.body.arg is not None:
            raise FeatureConfigError(f"{self.name}: body takes no arg slot")
        seen_slots = set()
        for ref in self.pre_calls:
            slot = 0 if ref.arg is None else ref.arg
            if not 0 <= slot < len(self.inputs):
                raise FeatureConfigError(
                    f"{self.name}: pre-call arg {slot} outside inputs"
                )
            if slot in seen_slots:
                raise FeatureConfigError(
                    f"{self.name}: two pre-calls target input slot {slot}"
                )
            seen_slots.add(slot)
        for ref in self.post_calls:
            if ref.arg is not None:
                raise FeatureConfigError(f"{self.name}: post-calls take no arg slot")

    def pre_slot(self, i: int) -> int:
        ref = self.pre_calls[i]
        return 0 if ref.arg is None else ref.arg


Registry = dict[str, OperatorSpec]


def register_operator(spec: OperatorSpec, registry: Registry) -> int:
    """Add an operator; names and output columns must be globally unique."""
    if spec.name in registry:
        raise FeatureConfigError(f"operator name {spec.name!r} already registered")
    taken = {c: s.name for s in registry.values() for c in s.outputs}
    for col in spec.outputs:
        if col in taken:
            raise FeatureConfigError(
                f"output column {col!r} already produced by {taken[col]!r}"
            )
    registry[spec.name] = spec
    return len(registry) - 1


# -- the function library ----------------------------------------------------


@dataclass
class Function:
    """A resolved library function.

    ``arity`` is "scalar" (maps one value, used by pre/post calls) or
    "tuple" (collapses the operator's effective input tuple, used by
    bodies).  ``out_domain`` tags the result for downstream handling:
    "str", "u64", or "same".  Pool functions additionally expose per-lane
    size and kernel callables for group-cooperative device execution.
    """

    spec: str
    arity: str
    out_domain: str
    map_scalar: Callable | None = None
    map_tuple: Callable | None = None
    needs_pool: bool = False
    lane_size: Callable | None = None
    lane_run: Callable | None = None


def _fn_lower(v):
    return None if v is None else str(v).lower()


def _fn_trim(v):
    return None if v is None else str(v).strip()


def _fn_mix(v):
    return None if v is None else fnv1a64((v & MASK64).to_bytes(8, "big"))


def _fn_fold(v):
    return None if v is None else ((v >> 32) ^ (v & 0xFFFFFFFF))


def _fn_id(v):
    return v


def _token_fallback(value, delim: str, index: int):
    if value is None:
        return None
    tokens = split_string(str(value), delim)
    return tokens[index] if index < len(tokens) else ""


def _token_lane_size(value) -> int:
    return 0 if value is None else len(str(value).encode("utf-8"))


def _token_lane_run(value, delim: str, index: int, data: bytearray, offset: int):
    """Split one lane's string using arena memory for the token array.

    Token bytes are written into the lane's granted region and the result
    is read back from that region, so overlapping grants would corrupt
    neighbouring lanes and fail the equivalence tests.
    """
    if value is None:
        return None
    tokens = split_string(str(value), delim)
    pos = offset
    spans = []
    for tok in tokens:
        raw = tok.encode("utf-8")
        data[pos : pos + len(raw)] = raw
        spans.append((pos, len(raw)))
        pos += len(raw)
    if index >= len(tokens):
        return ""
    lo, length = spans[index]
    return bytes(data[lo : lo + length]).decode("utf-8")


def _hash_tuple(parts, slot: int):
    encoded = []
    for p in parts:
        if p is None:
            return None
        encoded.append(value_bytes(p))
    return hash_combine(encoded, slot).sign


def _concat_tuple(parts, sep: str):
    out = []
    for p in parts:
        if p is None:
            return None
        out.append(p if isinstance(p, str) else str(p))
    return sep.join(out)


def resolve_function(
    spec: str, tables: Mapping[str, DictTable] | None = None
) -> Function:
    """Look up a function spec string.

    Specs: "lower", "trim", "id", "mix", "fold", "token:<delim>:<index>",
    "lookup:<table>", "hash:<slot>", "concat:<sep>".
    """
    tables = tables or {}
    head, _, rest = spec.partition(":")

    if head == "lower":
        return Function(spec, "scalar", "str", map_scalar=_fn_lower)
    if head == "trim":
        return Function(spec, "scalar", "str", map_scalar=_fn_trim)
    if head == "id":
        return Function(spec, "scalar", "same", map_scalar=_fn_id)
    if head == "mix":
        return Function(spec, "scalar", "u64", map_scalar=_fn_mix)
    if head == "fold":
        return Function(spec, "scalar", "u64", map_scalar=_fn_fold)

    if head == "token":
        delim, sep2, index_text = rest.partition(":")
        if not sep2:
            raise FeatureConfigError(f"{spec!r}: expected token:<delim>:<index>")
        if len(delim) != 1 or delim == ":":
            raise FeatureConfigError(f"{spec!r}: delimiter must be one byte, not ':'")
        try:
            index = int(index_text)
        except ValueError:
            raise FeatureConfigError(f"{spec!r}: bad token index") from None
        if index < 0:
            raise FeatureConfigError(f"{spec!r}: token index must be >= 0")
        return Function(
            spec,
            "scalar",
            "str",
            map_scalar=lambda v: _token_fallback(v, delim, index),
            needs_pool=True,
            lane_size=_token_lane_size,
            lane_run=lambda v, data, off: _token_lane_run(v, delim, index, data, off),
        )

    if head == "lookup":
        if not rest:
            raise FeatureConfigError(f"{spec!r}: expected lookup:<table>")
        if rest not in tables:
            raise FeatureConfigError(f"{spec!r}: unknown table {rest!r}")
        table = tables[rest]

        def _lookup(v, _table=table):
            if v is None:
                return _table.default
            return _table.lookup(v if isinstance(v, str) else str(v))

        return Function(spec, "scalar", "u64", map_scalar=_lookup)

    if head == "hash":
        try:
            slot = int(rest)
        except ValueError:
            raise FeatureConfigError(f"{spec!r}: expected hash:<slot>") from None
        if not 0 <= slot <= SLOT_MAX:
            raise FeatureConfigError(f"{spec!r}: slot outside u16 range")
        return Function(
            spec, "tuple", "u64", map_tuple=lambda t, _s=slot: _hash_tuple(t, _s)
        )

    if head == "concat":
        sep = rest
        return Function(
            spec, "tuple", "str", map_tuple=lambda t, _s=sep: _concat_tuple(t, _s)
        )

    raise FeatureConfigError(f"unknown function spec {spec!r}")


def output_domains(
    spec: OperatorSpec, tables: Mapping[str, DictTable] | None = None
) -> dict[str, str]:
    """Value domain ("str" or "u64") of each output column of an operator."""
    body = resolve_function(spec.body.spec, tables)
    if body.arity != "tuple":
        raise FeatureConfigError(
            f"{spec.name}: body function {spec.body.spec!r} must be tuple-arity"
        )
    domains = {}
    if spec.post_calls:
        for ref, col in zip(spec.post_calls, spec.outputs):
            fn = resolve_function(ref.spec, tables)
            if fn.arity != "scalar":
                raise FeatureConfigError(
                    f"{spec.name}: post-call {ref.spec!r} must be scalar-arity"
                )
            domains[col] = body.out_domain if fn.out_domain == "same" else fn.out_domain
    else:
        domains[spec.outputs[0]] = body.out_domain
    return domains
