"""Event structure definitions and the type-code table that drives offset parsing.

The config text uses ``<Event>`` / ``<Attribution>`` elements::

    <Event guid="2429279289" opcode="67" name="FileIORead">
      <Attribution name="Offset" type="13" offset="0" />
      <Attribution name="IrpPtr" type="13" />
    </Event>

Attributes without ``offset`` are laid out sequentially after the previous one.
"""
from __future__ import annotations

import re
import uuid
from xml.parsers import expat
from dataclasses import dataclass, field
from importlib import resources
from typing import Iterable, Optional

VARIABLE = -1
SEQUENTIAL = None
DEFAULT_MAX_FRAME = 64 * 1024

UNSIGNED = "unsigned-int"
SIGNED = "signed-int"
POINTER = "pointer"
UTF16SZ = "utf16-string-nullterm"
UTF8SZ = "utf8-string-nullterm"
COUNTED = "counted-bytes"

DECODE_KINDS = (UNSIGNED, SIGNED, POINTER, UTF16SZ, UTF8SZ, COUNTED)


class SchemaParseError(ValueError):
    """Config text is not well formed; ``line`` is 1-based."""

    def __init__(self, message: str, line: int | None = None):
        self.line = line
        super().__init__(f"line {line}: {message}" if line is not None else message)


class SchemaError(ValueError):
    pass


class SchemaConflictError(SchemaError):
    pass


@dataclass(frozen=True)
class TypeCode:
    code: int
    name: str
    width: int
    decode_kind: str

    @property
    def fixed(self) -> bool:
        return self.width != VARIABLE


TYPE_CODES: dict[int, TypeCode] = {
    t.code: t
    for t in (
        TypeCode(1, "UINT8", 1, UNSIGNED),
        TypeCode(2, "UINT16", 2, UNSIGNED),
        TypeCode(3, "UINT32", 4, UNSIGNED),
        TypeCode(4, "UINT64", 8, UNSIGNED),
        TypeCode(5, "INT32", 4, SIGNED),
        TypeCode(6, "INT64", 8, SIGNED),
        TypeCode(13, "PULONG", 8, POINTER),
        TypeCode(14, "PUSHORT", 2, UNSIGNED),
        TypeCode(20, "UTF16SZ", VARIABLE, UTF16SZ),
        TypeCode(21, "UTF8SZ", VARIABLE, UTF8SZ),
        TypeCode(22, "BYTES16", VARIABLE, COUNTED),
    )
}


@dataclass(frozen=True)
class AttributeSpec:
    name: str
    type_code: TypeCode
    declared_offset: Optional[int] = SEQUENTIAL


@dataclass(frozen=True)
class EventSchema:
    provider_id: int
    opcode: int
    event_name: str
    attributes: tuple[AttributeSpec, ...] = ()

    @property
    def key(self) -> tuple[int, int]:
        return (self.provider_id, self.opcode)

    def attribute_names(self) -> list[str]:
        return [a.name for a in self.attributes]


@dataclass
class SchemaTable:
    entries: dict[tuple[int, int], EventSchema] = field(default_factory=dict)
    type_codes: dict[int, TypeCode] = field(default_factory=lambda: dict(TYPE_CODES))
    max_frame: int = DEFAULT_MAX_FRAME

    def __len__(self) -> int:
        return len(self.entries)

    def by_name(self, event_name: str) -> EventSchema:
        for schema in self.entries.values():
            if schema.event_name == event_name:
                return schema
        raise KeyError(event_name)

    def providers(self) -> set[int]:
        return {p for p, _ in self.entries}


def parse_provider_id(text: str) -> int:
    """Accept unsigned decimal or GUID text; both map to one integer key."""
    text = text.strip()
    if text.isdigit():
        value = int(text)
    else:
        try:
            value = uuid.UUID(text.strip("{}")).int
        except ValueError:
            raise SchemaError(f"bad provider id {text!r}") from None
    if value >= 1 << 128:
        raise SchemaError(f"provider id {text!r} exceeds 128 bits")
    return value


def _int_attr(elem, attr, line, lo=0, hi=None):
    raw = elem.get(attr)
    if raw is None:
        raise SchemaParseError(f"<{elem.tag}> missing {attr!r}", line)
    try:
        value = int(raw, 0)
    except ValueError:
        raise SchemaParseError(f"{attr}={raw!r} is not an integer", line) from None
    if value < lo or (hi is not None and value > hi):
        raise SchemaParseError(f"{attr}={value} out of range", line)
    return value


_XML_DECL = re.compile(r"^\s*<\?xml[^>]*\?>")


@dataclass
class _Elem:
    tag: str
    attrib: dict
    line: int
    children: list = field(default_factory=list)

    def get(self, key, default=None):
        return self.attrib.get(key, default)


def _parse_tree(text: str) -> _Elem:
    holder = _Elem("", {}, 0)
    stack = [holder]
    p = expat.ParserCreate()

    def start(tag, attrib):
        elem = _Elem(tag, attrib, p.CurrentLineNumber)
        stack[-1].children.append(elem)
        stack.append(elem)

    def end(tag):
        stack.pop()

    p.StartElementHandler = start
    p.EndElementHandler = end
    try:
        p.Parse("<_root>" + text + "</_root>", True)
    except expat.ExpatError as exc:
        raise SchemaParseError(expat.ErrorString(exc.code), exc.lineno) from None
    return holder.children[0]


def load_schema(config_text: str, max_frame: int = DEFAULT_MAX_FRAME) -> SchemaTable:
    # blank out an XML declaration without shifting line numbers
    text = _XML_DECL.sub(lambda m: "\n" * m.group(0).count("\n"), config_text)
    root = _parse_tree(text)

    table = SchemaTable(max_frame=max_frame)
    events = []
    for elem in root.children:
        if elem.tag == "Events":
            events.extend(elem.children)
        else:
            events.append(elem)

    for ev in events:
        line = ev.line
        if ev.tag != "Event":
            raise SchemaParseError(f"unexpected element <{ev.tag}>", line)
        guid = ev.get("guid")
        if guid is None:
            raise SchemaParseError("<Event> missing 'guid'", line)
        try:
            provider = parse_provider_id(guid)
        except SchemaError as exc:
            raise SchemaParseError(str(exc), line) from None
        opcode = _int_attr(ev, "opcode", line, 0, 255)
        name = ev.get("name")
        if not name:
            raise SchemaParseError("<Event> missing 'name'", line)

        attrs = []
        for at in ev.children:
            if at.tag != "Attribution":
                raise SchemaParseError(f"unexpected element <{at.tag}>", at.line)
            aname = at.get("name")
            if not aname:
                raise SchemaParseError("<Attribution> missing 'name'", at.line)
            code = _int_attr(at, "type", at.line)
            if code not in table.type_codes:
                raise SchemaError(f"{name}.{aname}: unknown type code {code}")
            offset = None
            if at.get("offset") is not None:
                offset = _int_attr(at, "offset", at.line)
            attrs.append(AttributeSpec(aname, table.type_codes[code], offset))

        schema = EventSchema(provider, opcode, name, tuple(attrs))
        validate_schema(schema, max_frame)
        if schema.key in table.entries:
            raise SchemaConflictError(
                f"duplicate event key guid={guid} opcode={opcode} "
                f"({table.entries[schema.key].event_name} vs {name})"
            )
        table.entries[schema.key] = schema
    return table


def validate_schema(schema: EventSchema, max_frame: int = DEFAULT_MAX_FRAME) -> None:
    seen = set()
    last_offset = -1
    for a in schema.attributes:
        if a.name in seen:
            raise SchemaError(f"{schema.event_name}: duplicate attribute {a.name!r}")
        seen.add(a.name)
        if a.declared_offset is not None:
            if a.declared_offset <= last_offset:
                raise SchemaError(
                    f"{schema.event_name}.{a.name}: offset {a.declared_offset} "
                    f"not increasing"
                )
            last_offset = a.declared_offset

    if all(a.type_code.fixed for a in schema.attributes):
        cursor = 0
        for a in schema.attributes:
            if a.declared_offset is not None and a.declared_offset != cursor:
                raise SchemaError(
                    f"{schema.event_name}.{a.name}: declared offset "
                    f"{a.declared_offset} != sequential offset {cursor}"
                )
            cursor += a.type_code.width

    seq = sum(
        a.type_code.width
        for a in schema.attributes
        if a.declared_offset is None and a.type_code.fixed
    )
    if seq + max(last_offset, 0) > max_frame:
        raise SchemaError(f"{schema.event_name}: layout exceeds max frame {max_frame}")


def lookup(table: SchemaTable, provider_id: int, opcode: int) -> Optional[EventSchema]:
    return table.entries.get((provider_id, opcode))


def frame_width(schema: EventSchema) -> int:
    """Fixed payload size in bytes, or ``VARIABLE``."""
    total = 0
    for a in schema.attributes:
        if not a.type_code.fixed:
            return VARIABLE
        total += a.type_code.width
    return total


def dump_schema(table: SchemaTable) -> str:
    lines = []
    for key in sorted(table.entries):
        s = table.entries[key]
        lines.append(f'<Event guid="{s.provider_id}" opcode="{s.opcode}" name="{s.event_name}">')
        for a in s.attributes:
            off = "" if a.declared_offset is None else f' offset="{a.declared_offset}"'
            lines.append(f'  <Attribution name="{a.name}" type="{a.type_code.code}"{off} />')
        lines.append("</Event>")
    return "\n".join(lines) + "\n"


def load_schema_file(path) -> SchemaTable:
    with open(path, "r", encoding="utf-8") as fh:
        return load_schema(fh.read())


def default_schema_text() -> str:
    return resources.files("kevtrace.data").joinpath("kernel_schema.xml").read_text("utf-8")


def default_schema() -> SchemaTable:
    return load_schema(default_schema_text())


def schemas_by_name(tables: Iterable[EventSchema]) -> dict[str, EventSchema]:
    return {s.event_name: s for s in tables}
