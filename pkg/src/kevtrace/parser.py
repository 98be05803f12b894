"""Offset-driven decoding of raw event payloads into named attributes."""
from __future__ import annotations

import struct
from dataclasses import dataclass
from typing import Optional

from .ingest.trace import RawEvent
from .schema import (
    COUNTED,
    POINTER,
    SIGNED,
    UNSIGNED,
    UTF8SZ,
    UTF16SZ,
    EventSchema,
    SchemaTable,
)

TID_SENTINEL = 0xFFFFFFFF

_INT_FORMATS = {
    (UNSIGNED, 1): "<B", (UNSIGNED, 2): "<H", (UNSIGNED, 4): "<I", (UNSIGNED, 8): "<Q",
    (POINTER, 8): "<Q", (POINTER, 4): "<I", (POINTER, 2): "<H",
    (SIGNED, 1): "<b", (SIGNED, 2): "<h", (SIGNED, 4): "<i", (SIGNED, 8): "<q",
}


class AttributeValue:
    """One decoded attribute. Unresolved values hold 0 or an empty text/bytes."""

    __slots__ = ("name", "kind", "value", "resolved")

    def __init__(self, name: str, kind: str, value, resolved: bool = True):
        self.name = name
        self.kind = kind
        self.value = value
        self.resolved = resolved

    def __eq__(self, other):
        if not isinstance(other, AttributeValue):
            return NotImplemented
        return (self.name, self.kind, self.value, self.resolved) == (
            other.name, other.kind, other.value, other.resolved)

    def __repr__(self):
        flag = "" if self.resolved else ", unresolved"
        return f"AttributeValue({self.name}={self.value!r}{flag})"


def sentinel_for(kind: str):
    if kind in (UTF16SZ, UTF8SZ):
        return ""
    if kind == COUNTED:
        return b""
    return 0


class Layout:
    """Per-schema decoding plan, shared by every event of that schema.

    The leading run of fixed-width attributes whose offsets are implied by
    position is decoded with one combined ``struct`` call.
    """

    __slots__ = ("schema", "names", "kinds", "index", "steps", "prefix", "prefix_len",
                 "bytes_slots")

    def __init__(self, schema: EventSchema):
        self.schema = schema
        self.names = tuple(a.name for a in schema.attributes)
        self.kinds = tuple(a.type_code.decode_kind for a in schema.attributes)
        self.index = {n: i for i, n in enumerate(self.names)}
        self.steps = [_Step(a) for a in schema.attributes]
        self.bytes_slots = tuple(i for i, k in enumerate(self.kinds) if k == COUNTED)
        fmt, cursor, count = "<", 0, 0
        for st in self.steps:
            if st.unpack is None or (st.offset is not None and st.offset != cursor):
                break
            fmt += _INT_FORMATS[(st.kind, st.width)][1]
            cursor += st.width
            count += 1
        self.prefix = struct.Struct(fmt) if count else None
        self.prefix_len = count


_layouts: dict[int, Layout] = {}


def layout_for(schema: EventSchema) -> Layout:
    lay = _layouts.get(id(schema))
    if lay is None or lay.schema is not schema:
        if len(_layouts) >= 4096:
            _layouts.clear()
        lay = _layouts[id(schema)] = Layout(schema)
    return lay


class ParsedEvent:
    """Decoded event. Attribute values live in ``values`` in schema order;
    ``unresolved`` names the ones the payload could not supply."""

    __slots__ = ("timestamp", "provider_id", "opcode", "event_name", "pid", "tid",
                 "layout", "values", "unresolved", "short_payload", "trailing_bytes")

    def __init__(self, timestamp, provider_id, opcode, event_name, pid, tid,
                 layout: Layout, values: list, unresolved: set,
                 short_payload: bool = False, trailing_bytes: int = 0):
        self.timestamp = timestamp
        self.provider_id = provider_id
        self.opcode = opcode
        self.event_name = event_name
        self.pid = pid
        self.tid = tid
        self.layout = layout
        self.values = values
        self.unresolved = unresolved
        self.short_payload = short_payload
        self.trailing_bytes = trailing_bytes

    @property
    def attrs(self) -> dict[str, AttributeValue]:
        lay = self.layout
        return {
            n: AttributeValue(n, k, v, n not in self.unresolved)
            for n, k, v in zip(lay.names, lay.kinds, self.values)
        }

    def has(self, name) -> bool:
        return name in self.layout.index

    def value(self, name, default=None):
        i = self.layout.index.get(name)
        if i is None or name in self.unresolved:
            return default
        return self.values[i]

    def set_value(self, name, value) -> None:
        self.values[self.layout.index[name]] = value
        self.unresolved.discard(name)

    def _key(self):
        return (self.timestamp, self.provider_id, self.opcode, self.event_name, self.pid,
                self.tid, self.layout.names, self.values, self.unresolved,
                self.short_payload, self.trailing_bytes)

    def __eq__(self, other):
        if not isinstance(other, ParsedEvent):
            return NotImplemented
        return self._key() == other._key()

    def __repr__(self):
        return (f"ParsedEvent({self.event_name} ts={self.timestamp} pid={self.pid} "
                f"tid={self.tid} attrs={dict(zip(self.layout.names, self.values))} "
                f"unresolved={sorted(self.unresolved)})")


@dataclass
class ParseStats:
    parsed: int = 0
    skipped_unknown: int = 0
    short_payload: int = 0
    trailing_bytes: int = 0


class _Step:
    __slots__ = ("name", "kind", "width", "offset", "unpack")

    def __init__(self, spec):
        tc = spec.type_code
        self.name = spec.name
        self.kind = tc.decode_kind
        self.width = tc.width
        self.offset = spec.declared_offset
        fmt = _INT_FORMATS.get((tc.decode_kind, tc.width))
        self.unpack = struct.Struct(fmt).unpack_from if fmt else None


def _utf16_end(payload: bytes, start: int) -> int:
    """Index of the aligned UTF-16 NUL terminator at or after ``start``, or -1."""
    pos = start
    while True:
        idx = payload.find(b"\x00\x00", pos)
        if idx < 0:
            return -1
        if (idx - start) % 2 == 0:
            return idx
        pos = idx + 1


def decode_at(payload: bytes, cursor: int, kind: str, width: int):
    """Decode one value at ``cursor``; returns (value, consumed) or None past the end."""
    n = len(payload)
    if width > 0:
        if cursor + width > n:
            return None
        fmt = _INT_FORMATS[(kind, width)]
        return struct.unpack_from(fmt, payload, cursor)[0], width
    if kind == UTF16SZ:
        end = _utf16_end(payload, cursor)
        if end < 0:
            return None
        return payload[cursor:end].decode("utf-16-le", errors="replace"), end - cursor + 2
    if kind == UTF8SZ:
        end = payload.find(b"\x00", cursor)
        if end < 0:
            return None
        return payload[cursor:end].decode("utf-8", errors="replace"), end - cursor + 1
    if kind == COUNTED:
        if cursor + 2 > n:
            return None
        length = payload[cursor] | (payload[cursor + 1] << 8)
        if cursor + 2 + length > n:
            return None
        return bytes(payload[cursor + 2:cursor + 2 + length]), length + 2
    raise ValueError(f"unknown decode kind {kind!r}")


def _walk(payload: bytes, lay: Layout):
    n = len(payload)
    steps = lay.steps
    prefix = lay.prefix
    if prefix is not None and prefix.size <= n:
        values = list(prefix.unpack_from(payload, 0))
        start, cursor = lay.prefix_len, prefix.size
    else:
        values, start, cursor = [], 0, 0
    for i in range(start, len(steps)):
        step = steps[i]
        if step.offset is not None:
            cursor = step.offset
        if step.unpack is not None:
            if cursor + step.width <= n:
                values.append(step.unpack(payload, cursor)[0])
                cursor += step.width
                continue
        elif step.kind == UTF16SZ:
            end = _utf16_end(payload, cursor)
            if end >= 0:
                values.append(payload[cursor:end].decode("utf-16-le", errors="replace"))
                cursor = end + 2
                continue
        else:
            got = decode_at(payload, cursor, step.kind, step.width)
            if got is not None:
                values.append(got[0])
                cursor += got[1]
                continue
        # this attribute and every later one are unresolved
        unresolved = set(lay.names[i:])
        values.extend(sentinel_for(k) for k in lay.kinds[i:])
        return values, unresolved, True, 0
    return values, set(), False, max(0, n - cursor)


def offset_parse(payload: bytes, schema: EventSchema):
    """Walk the schema's attribute list over ``payload``.

    The cursor starts at 0, jumps to an attribute's declared offset when it
    has one, and advances by the bytes each value consumed. Once an attribute
    runs past the end of the payload it and every later attribute are
    unresolved. Returns ``(attrs, unresolved, short, trailing)`` where
    ``attrs`` maps names to :class:`AttributeValue` in schema order.
    """
    lay = layout_for(schema)
    values, unresolved, short, trailing = _walk(payload, lay)
    attrs = {
        n: AttributeValue(n, k, v, n not in unresolved)
        for n, k, v in zip(lay.names, lay.kinds, values)
    }
    return attrs, unresolved, short, trailing


def distribute(event: RawEvent, table: SchemaTable,
               stats: Optional[ParseStats] = None) -> Optional[EventSchema]:
    schema = table.entries.get((event.provider_id, event.opcode))
    if schema is None and stats is not None:
        stats.skipped_unknown += 1
    return schema


def parse(event: RawEvent, table: SchemaTable,
          stats: Optional[ParseStats] = None) -> Optional[ParsedEvent]:
    schema = table.entries.get((event.provider_id, event.opcode))
    if schema is None:
        if stats is not None:
            stats.skipped_unknown += 1
        return None
    lay = _layouts.get(id(schema))
    if lay is None or lay.schema is not schema:
        lay = layout_for(schema)
    values, unresolved, short, trailing = _walk(event.payload, lay)
    if stats is not None:
        stats.parsed += 1
        if short:
            stats.short_payload += 1
        if trailing:
            stats.trailing_bytes += 1
    return ParsedEvent(
        event.timestamp, event.provider_id, event.opcode, schema.event_name,
        event.pid, event.tid, lay, values, unresolved, short, trailing,
    )


def encode_value(kind: str, width: int, value) -> bytes:
    if width > 0:
        return struct.pack(_INT_FORMATS[(kind, width)], value)
    if kind == UTF16SZ:
        return str(value).encode("utf-16-le") + b"\x00\x00"
    if kind == UTF8SZ:
        return str(value).encode("utf-8") + b"\x00"
    if kind == COUNTED:
        data = bytes(value)
        if len(data) > 0xFFFF:
            raise ValueError("counted field longer than 65535 bytes")
        return struct.pack("<H", len(data)) + data
    raise ValueError(f"unknown decode kind {kind!r}")


def encode_payload(schema: EventSchema, values: dict, omit_from: Optional[str] = None) -> bytes:
    """Lay ``values`` out per ``schema``; missing values encode as 0 / empty.

    ``omit_from`` truncates the payload just before that attribute, which is
    how a producer leaves trailing fields (such as a file name) out of a frame.
    """
    out = bytearray()
    for spec in schema.attributes:
        if spec.name == omit_from:
            break
        if spec.declared_offset is not None:
            if spec.declared_offset < len(out):
                raise ValueError(f"{schema.event_name}.{spec.name}: layout overlap")
            out.extend(b"\x00" * (spec.declared_offset - len(out)))
        tc = spec.type_code
        value = values.get(spec.name, sentinel_for(tc.decode_kind))
        out += encode_value(tc.decode_kind, tc.width, value)
    return bytes(out)
