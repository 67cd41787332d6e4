"""Bit-exact columnar view files with column-projection reads.

A view is stored as an FBXC file: a header (magic, version, schema), a
segment directory, the column segments themselves, and a CRC32 footer over
the body.  Every column owns a null bitmap segment plus either one
fixed-width payload segment (Int64, Float32) or an offsets segment and a
var-length payload segment (Utf8, Json).  Reads seek directly to the
requested columns' segments, so the bytes-read accounting below is the
actual I/O performed: header plus requested segments, nothing else.

The full byte layout is documented in docs/fbxc_format.md.
"""

from __future__ import annotations

import enum
import struct
import zlib
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

MAGIC = b"FBXC"
VERSION = 1

_U16 = struct.Struct("<H")
_U32 = struct.Struct("<I")
_U64 = struct.Struct("<Q")
_SEG = struct.Struct("<QQ")

INT64_MIN = -(1 << 63)
INT64_MAX = (1 << 63) - 1


class FormatError(ValueError):
    """A view file violates the FBXC format."""


class BadMagicError(FormatError):
    pass


class UnsupportedVersionError(FormatError):
    pass


class TruncatedError(FormatError):
    pass


class ChecksumError(FormatError):
    pass


class UnknownColumnError(KeyError):
    pass


class Kind(enum.Enum):
    """Column value kinds; the numeric code is what the file stores."""

    INT64 = 0
    FLOAT32 = 1
    UTF8 = 2
    JSON = 3

    @property
    def fixed_width(self) -> int | None:
        if self is Kind.INT64:
            return 8
        if self is Kind.FLOAT32:
            return 4
        return None

    @property
    def var_length(self) -> bool:
        return self.fixed_width is None

    @classmethod
    def from_name(cls, name: str) -> "Kind":
        try:
            return cls[name.upper()]
        except KeyError:
            raise ValueError(f"unknown column kind {name!r}") from None


def _zero_value(kind: Kind):
    if kind is Kind.INT64:
        return 0
    if kind is Kind.FLOAT32:
        return 0.0
    return ""


def canon_f32(value: float) -> float:
    """Round a float to exactly representable float32 (storage precision)."""
    return struct.unpack("<f", struct.pack("<f", value))[0]


def wrap_u64(value: int) -> int:
    """Two's-complement image of a u64 so it fits an Int64 column."""
    if not 0 <= value < (1 << 64):
        raise ValueError(f"value {value} outside u64 range")
    return value - (1 << 64) if value >= (1 << 63) else value


def unwrap_u64(value: int) -> int:
    """Inverse of wrap_u64; accepts already-unsigned values unchanged."""
    if not INT64_MIN <= value < (1 << 64):
        raise ValueError(f"value {value} outside wrapped u64 range")
    return value + (1 << 64) if value < 0 else value


# -- null bitmaps: 1 bit per row, LSB-first, bit set means null ------------


def bitmap_size(row_count: int) -> int:
    return (row_count + 7) // 8


def bit_get(bitmap: bytes | bytearray, i: int) -> bool:
    return bool(bitmap[i >> 3] & (1 << (i & 7)))


def bit_set(bitmap: bytearray, i: int) -> None:
    bitmap[i >> 3] |= 1 << (i & 7)


def bit_clear(bitmap: bytearray, i: int) -> None:
    bitmap[i >> 3] &= ~(1 << (i & 7)) & 0xFF


@dataclass(frozen=True)
class ViewSchema:
    """Ordered column names/kinds plus the key columns used for joins."""

    columns: tuple[tuple[str, Kind], ...]
    key_columns: tuple[str, ...] = ()
    row_count: int = 0

    def __post_init__(self):
        names = [n for n, _ in self.columns]
        if any(not n for n in names):
            raise ValueError("column names must be non-empty")
        if len(set(names)) != len(names):
            raise ValueError("column names must be unique")
        unknown = set(self.key_columns) - set(names)
        if unknown:
            raise ValueError(f"key columns not in schema: {sorted(unknown)}")
        if self.row_count < 0:
            raise ValueError("row_count must be non-negative")

    @property
    def names(self) -> tuple[str, ...]:
        return tuple(n for n, _ in self.columns)

    def kind_of(self, name: str) -> Kind:
        for n, k in self.columns:
            if n == name:
                return k
        raise UnknownColumnError(name)

    def with_row_count(self, row_count: int) -> "ViewSchema":
        return ViewSchema(self.columns, self.key_columns, row_count)


@dataclass
class Column:
    """One column's values plus its null bitmap.

    The bitmap is authoritative: a set bit means the value slot is
    undefined, and the slot then holds the kind's zero value so that raw
    payload bytes are deterministic.
    """

    kind: Kind
    values: list
    nulls: bytearray

    @classmethod
    def build(cls, kind: Kind, items: Iterable) -> "Column":
        """Canonicalize Python values (None marks null) into a column."""
        values = []
        nulls = bytearray()
        for i, item in enumerate(items):
            if i % 8 == 0:
                nulls.append(0)
            if item is None:
                values.append(_zero_value(kind))
                bit_set(nulls, i)
                continue
            if kind is Kind.INT64:
                v = int(item)
                if not INT64_MIN <= v <= INT64_MAX:
                    raise ValueError(f"value {v} out of Int64 range")
                values.append(v)
            elif kind is Kind.FLOAT32:
                values.append(canon_f32(float(item)))
            else:
                if not isinstance(item, str):
                    raise ValueError(f"{kind.name} column needs str, got {type(item)}")
                values.append(item)
        return cls(kind, values, nulls)

    def __len__(self) -> int:
        return len(self.values)

    def is_null(self, i: int) -> bool:
        return bit_get(self.nulls, i)

    def get(self, i: int):
        """Value at row i, with None standing in for null."""
        return None if bit_get(self.nulls, i) else self.values[i]

    def to_pylist(self) -> list:
        return [self.get(i) for i in range(len(self.values))]

    def __eq__(self, other) -> bool:
        if not isinstance(other, Column):
            return NotImplemented
        if self.kind is not other.kind or len(self) != len(other):
            return False
        return all(self.get(i) == other.get(i) for i in range(len(self)))


@dataclass
class ColumnBatch:
    """In-memory image of a view: a schema and its column vectors."""

    schema: ViewSchema
    columns: dict[str, Column]

    def __post_init__(self):
        for name, kind in self.schema.columns:
            col = self.columns.get(name)
            if col is None:
                raise ValueError(f"missing column {name!r}")
            if col.kind is not kind:
                raise ValueError(f"column {name!r} kind mismatch")
            if len(col) != self.schema.row_count:
                raise ValueError(
                    f"column {name!r} has {len(col)} rows, "
                    f"schema says {self.schema.row_count}"
                )

    @classmethod
    def from_pydict(
        cls,
        spec: Sequence[tuple[str, Kind]],
        data: dict[str, list],
        key_columns: Sequence[str] = (),
    ) -> "ColumnBatch":
        lengths = {len(v) for v in data.values()} or {0}
        if len(lengths) != 1:
            raise ValueError("column lists have differing lengths")
        n = lengths.pop()
        schema = ViewSchema(tuple(spec), tuple(key_columns), n)
        cols = {name: Column.build(kind, data[name]) for name, kind in spec}
        return cls(schema, cols)

    @property
    def row_count(self) -> int:
        return self.schema.row_count

    def column(self, name: str) -> Column:
        try:
            return self.columns[name]
        except KeyError:
            raise UnknownColumnError(name) from None

    def row(self, i: int) -> dict:
        return {name: self.columns[name].get(i) for name in self.schema.names}

    def take(self, indices: Sequence[int]) -> "ColumnBatch":
        """New batch holding the given rows, in the given order."""
        cols = {}
        for name, kind in self.schema.columns:
            src = self.columns[name]
            cols[name] = Column.build(kind, (src.get(i) for i in indices))
        return ColumnBatch(self.schema.with_row_count(len(indices)), cols)

    def __eq__(self, other) -> bool:
        if not isinstance(other, ColumnBatch):
            return NotImplemented
        return self.schema == other.schema and all(
            self.columns[n] == other.columns[n] for n in self.schema.names
        )


@dataclass(frozen=True)
class Segment:
    """One directory entry: a column part's absolute span in the file."""

    column: str
    part: str  # "nulls" | "offsets" | "data"
    offset: int
    length: int


@dataclass(frozen=True)
class ViewFile:
    """Parsed header of an on-disk view: schema plus the segment map."""

    path: Path
    schema: ViewSchema
    segments: tuple[Segment, ...]
    header_bytes: int  # everything before the body, read on every access
    body_bytes: int
    checksum: int

    def segments_of(self, column: str) -> tuple[Segment, ...]:
        return tuple(s for s in self.segments if s.column == column)


def _column_parts(kind: Kind) -> tuple[str, ...]:
    return ("nulls", "offsets", "data") if kind.var_length else ("nulls", "data")


def _encode_payload(col: Column) -> dict[str, bytes]:
    n = len(col)
    parts: dict[str, bytes] = {"nulls": bytes(col.nulls[: bitmap_size(n)])}
    if col.kind is Kind.INT64:
        parts["data"] = struct.pack(f"<{n}q", *col.values)
    elif col.kind is Kind.FLOAT32:
        parts["data"] = struct.pack(f"<{n}f", *col.values)
    else:
        blobs = [v.encode("utf-8") for v in col.values]
        offsets = [0]
        for b in blobs:
            offsets.append(offsets[-1] + len(b))
        if offsets[-1] > 0xFFFFFFFF:
            raise FormatError("var-length payload exceeds u32 offset range")
        parts["offsets"] = struct.pack(f"<{n + 1}I", *offsets)
        parts["data"] = b"".join(blobs)
    return parts


def write_view(batch: ColumnBatch, destination: str | Path) -> ViewFile:
    """Serialize a batch to an FBXC file; round-trips bit-exactly.

    Returns the parsed file handle, including the segment map.
    """
    if not batch.schema.columns:
        raise FormatError("cannot write a view with zero columns")
    destination = Path(destination)

    schema = batch.schema
    header = bytearray()
    header += MAGIC
    header += _U16.pack(VERSION)
    header += _U64.pack(schema.row_count)
    header += _U16.pack(len(schema.columns))
    header += _U16.pack(len(schema.key_columns))
    for name, kind in schema.columns:
        raw = name.encode("utf-8")
        header.append(kind.value)
        header += _U16.pack(len(raw))
        header += raw
    name_index = {n: i for i, (n, _) in enumerate(schema.columns)}
    for key in schema.key_columns:
        header += _U16.pack(name_index[key])

    payloads: list[tuple[str, str, bytes]] = []
    for name, kind in schema.columns:
        parts = _encode_payload(batch.columns[name])
        for part in _column_parts(kind):
            payloads.append((name, part, parts[part]))

    directory_bytes = _U32.size + _SEG.size * len(payloads)
    body_start = len(header) + directory_bytes

    segments = []
    cursor = body_start
    for name, part, blob in payloads:
        segments.append(Segment(name, part, cursor, len(blob)))
        cursor += len(blob)

    directory = bytearray(_U32.pack(len(payloads)))
    for seg in segments:
        directory += _SEG.pack(seg.offset, seg.length)

    body = b"".join(blob for _, _, blob in payloads)
    crc = zlib.crc32(body) & 0xFFFFFFFF

    with open(destination, "wb") as fh:
        fh.write(header)
        fh.write(directory)
        fh.write(body)
        fh.write(_U32.pack(crc))

    return ViewFile(
        path=destination,
        schema=schema,
        segments=tuple(segments),
        header_bytes=body_start,
        body_bytes=len(body),
        checksum=crc,
    )


def _parse_header(path: Path) -> ViewFile:
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 6:
        raise TruncatedError(f"{path}: too short for a header")
    if blob[:4] != MAGIC:
        raise BadMagicError(f"{path}: magic {blob[:4]!r}, expected {MAGIC!r}")
    (version,) = _U16.unpack_from(blob, 4)
    if version != VERSION:
        raise UnsupportedVersionError(f"{path}: version {version}, expected {VERSION}")

    pos = 6
    try:
        (row_count,) = _U64.unpack_from(blob, pos)
        pos += 8
        (n_cols,) = _U16.unpack_from(blob, pos)
        pos += 2
        (n_keys,) = _U16.unpack_from(blob, pos)
        pos += 2
        columns = []
        for _ in range(n_cols):
            kind = Kind(blob[pos])
            pos += 1
            (name_len,) = _U16.unpack_from(blob, pos)
            pos += 2
            name = blob[pos : pos + name_len].decode("utf-8")
            if len(name.encode("utf-8")) != name_len:
                raise TruncatedError(f"{path}: truncated column name")
            pos += name_len
            columns.append((name, kind))
        key_columns = []
        for _ in range(n_keys):
            (idx,) = _U16.unpack_from(blob, pos)
            pos += 2
            key_columns.append(columns[idx][0])
        (n_segs,) = _U32.unpack_from(blob, pos)
        pos += 4
        segments = []
        seg_meta = []
        for _ in range(n_segs):
            offset, length = _SEG.unpack_from(blob, pos)
            pos += _SEG.size
            seg_meta.append((offset, length))
    except (struct.error, IndexError, ValueError) as exc:
        if isinstance(exc, FormatError):
            raise
        raise TruncatedError(f"{path}: malformed header ({exc})") from None

    schema = ViewSchema(tuple(columns), tuple(key_columns), row_count)
    expected_parts = [
        (name, part) for name, kind in columns for part in _column_parts(kind)
    ]
    if len(expected_parts) != n_segs:
        raise FormatError(f"{path}: directory has {n_segs} segments, schema implies {len(expected_parts)}")

    header_bytes = pos
    cursor = header_bytes
    for (name, part), (offset, length) in zip(expected_parts, seg_meta):
        # Segments must tile the body exactly, in directory order.
        if offset != cursor:
            raise FormatError(f"{path}: segment {name}/{part} not contiguous")
        segments.append(Segment(name, part, offset, length))
        cursor += length
    body_bytes = cursor - header_bytes
    if cursor + 4 != len(blob):
        raise TruncatedError(
            f"{path}: file is {len(blob)} bytes, layout implies {cursor + 4}"
        )
    (crc,) = _U32.unpack_from(blob, cursor)

    return ViewFile(
        path=path,
        schema=schema,
        segments=tuple(segments),
        header_bytes=header_bytes,
        body_bytes=body_bytes,
        checksum=crc,
    )


def open_view(source: str | Path) -> ViewFile:
    """Parse and validate a view file's header and segment directory."""
    return _parse_header(Path(source))


def schema_of(source: ViewFile | str | Path) -> ViewSchema:
    """Schema recorded in the file header (equal to the writer's schema)."""
    if isinstance(source, ViewFile):
        source = source.path
    return _parse_header(Path(source)).schema


def _decode_fixed(kind: Kind, raw: bytes, n: int) -> list:
    if kind is Kind.INT64:
        return list(struct.unpack(f"<{n}q", raw))
    return list(struct.unpack(f"<{n}f", raw))


def read_columns(
    source: ViewFile | str | Path,
    wanted: Iterable[str] | None = None,
    rows: tuple[int, int] | None = None,
) -> tuple[ColumnBatch, int]:
    """Read a projection of a view, counting exactly the bytes touched.

    ``wanted`` selects columns (None means all); the result keeps schema
    order.  ``rows`` is an optional half-open row range.  The returned byte
    count is the header plus the segment bytes actually read for the
    requested columns; unrequested segments are never touched.  The body
    checksum is verified only when the read covers the entire body (all
    columns, full range), since anything less deliberately skips bytes.
    """
    view = source if isinstance(source, ViewFile) else open_view(source)
    path = view.path
    schema = view.schema
    n = schema.row_count

    if wanted is None:
        wanted_set = set(schema.names)
    else:
        wanted_set = set(wanted)
        unknown = wanted_set - set(schema.names)
        if unknown:
            raise UnknownColumnError(sorted(unknown)[0])

    if rows is None:
        start, stop = 0, n
    else:
        start, stop = rows
        if not (0 <= start <= stop <= n):
            raise ValueError(f"row range [{start}, {stop}) outside [0, {n})")

    full_read = wanted_set == set(schema.names) and (start, stop) == (0, n)
    bytes_read = view.header_bytes  # header + directory re-read on every access

    out_spec = [(name, kind) for name, kind in schema.columns if name in wanted_set]
    seg_map = {(s.column, s.part): s for s in view.segments}
    columns: dict[str, Column] = {}

    with open(path, "rb") as fh:
        file_len = path.stat().st_size

        def read_span(offset: int, length: int) -> bytes:
            nonlocal bytes_read
            if offset + length > file_len:
                raise TruncatedError(f"{path}: segment extends past end of file")
            fh.seek(offset)
            raw = fh.read(length)
            if len(raw) != length:
                raise TruncatedError(f"{path}: short read")
            bytes_read += length
            return raw

        if full_read:
            # Whole-body read: fetch segments in order and verify the CRC
            # before decoding anything.
            body = read_span(view.header_bytes, view.body_bytes)
            crc = zlib.crc32(body) & 0xFFFFFFFF
            if crc != view.checksum:
                raise ChecksumError(
                    f"{path}: body CRC {crc:#010x} != footer {view.checksum:#010x}"
                )

            def segment_bytes(seg: Segment, lo: int, hi: int) -> bytes:
                base = seg.offset - view.header_bytes
                return body[base + lo : base + hi]

        else:

            def segment_bytes(seg: Segment, lo: int, hi: int) -> bytes:
                return read_span(seg.offset + lo, hi - lo)

        count = stop - start
        for name, kind in out_spec:
            null_seg = seg_map[(name, "nulls")]
            if count == 0:
                nulls_raw = b""
            else:
                lo, hi = start >> 3, ((stop - 1) >> 3) + 1
                nulls_raw = segment_bytes(null_seg, lo, hi)
            nulls = bytearray(bitmap_size(count))
            for i in range(count):
                j = start + i - ((start >> 3) << 3)
                if bit_get(nulls_raw, j):
                    bit_set(nulls, i)

            if kind.var_length:
                off_seg = seg_map[(name, "offsets")]
                off_raw = segment_bytes(off_seg, start * 4, (stop + 1) * 4)
                offsets = struct.unpack(f"<{count + 1}I", off_raw)
                data_seg = seg_map[(name, "data")]
                payload = segment_bytes(data_seg, offsets[0], offsets[-1])
                base = offsets[0]
                values = [
                    payload[offsets[i] - base : offsets[i + 1] - base].decode("utf-8")
                    for i in range(count)
                ]
            else:
                width = kind.fixed_width
                data_seg = seg_map[(name, "data")]
                raw = segment_bytes(data_seg, start * width, stop * width)
                values = _decode_fixed(kind, raw, count)

            columns[name] = Column(kind, values, nulls)

    out_keys = tuple(k for k in schema.key_columns if k in wanted_set)
    out_schema = ViewSchema(tuple(out_spec), out_keys, count)
    return ColumnBatch(out_schema, columns), bytes_read
