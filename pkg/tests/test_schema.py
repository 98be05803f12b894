import pytest
from hypothesis import given, settings, strategies as st

from kevtrace.schema import (
    COUNTED,
    VARIABLE,
    AttributeSpec,
    EventSchema,
    SchemaConflictError,
    SchemaError,
    SchemaParseError,
    SchemaTable,
    dump_schema,
    frame_width,
    load_schema,
    lookup,
    parse_provider_id,
    validate_schema,
)

FILEIO = 2429279289

SMALL = """<?xml version="1.0"?>
<Events>
  <Event guid="2429279289" opcode="67" name="FileIORead">
    <Attribution name="Offset" type="4" offset="0" />
    <Attribution name="IrpPtr" type="13" />
    <Attribution name="FileName" type="20" />
  </Event>
</Events>
"""


def test_load_small_schema():
    table = load_schema(SMALL)
    s = lookup(table, FILEIO, 67)
    assert s.event_name == "FileIORead"
    assert s.attribute_names() == ["Offset", "IrpPtr", "FileName"]
    assert s.attributes[0].declared_offset == 0
    assert s.attributes[1].declared_offset is None
    assert frame_width(s) == VARIABLE
    assert lookup(table, FILEIO, 68) is None


def test_default_schema_has_core_events(table):
    names = {s.event_name for s in table.entries.values()}
    for n in ("FileIORead", "FileIOWrite", "ProcessStart", "CSwitch", "ImageLoad",
              "StackWalk", "SysClEnter", "DiskIoVolumeMap", "TcpIpConnect"):
        assert n in names
    assert table.by_name("FileIORead").provider_id == FILEIO


def test_guid_and_decimal_provider_ids_agree():
    assert parse_provider_id("42") == 42
    g = "{90cbdc39-4a3e-11d1-84f4-0000f80464e3}"
    assert parse_provider_id(g) == parse_provider_id(g.strip("{}"))
    with pytest.raises(SchemaError):
        parse_provider_id("not-a-guid")


def test_malformed_xml_reports_line():
    text = '<Event guid="1" opcode="1" name="A">\n  <Attribution name="x" type="1">\n</Event>'
    with pytest.raises(SchemaParseError) as exc:
        load_schema(text)
    assert exc.value.line is not None


def test_missing_attribute_reports_line():
    with pytest.raises(SchemaParseError) as exc:
        load_schema('\n\n<Event guid="1" name="A" />')
    assert exc.value.line == 3


def test_unknown_type_code():
    with pytest.raises(SchemaError):
        load_schema('<Event guid="1" opcode="1" name="A"><Attribution name="x" type="99"/></Event>')


def test_duplicate_key_conflicts():
    ev = '<Event guid="1" opcode="1" name="{}"><Attribution name="x" type="1"/></Event>'
    with pytest.raises(SchemaConflictError):
        load_schema(ev.format("A") + ev.format("B"))


def test_duplicate_attribute_rejected():
    with pytest.raises(SchemaError):
        load_schema('<Event guid="1" opcode="1" name="A">'
                    '<Attribution name="x" type="1"/><Attribution name="x" type="2"/></Event>')


def test_fixed_layout_offset_must_match_sequence():
    with pytest.raises(SchemaError):
        load_schema('<Event guid="1" opcode="1" name="A">'
                    '<Attribution name="x" type="3"/><Attribution name="y" type="3" offset="2"/>'
                    '</Event>')


def test_offsets_must_increase():
    with pytest.raises(SchemaError):
        load_schema('<Event guid="1" opcode="1" name="A">'
                    '<Attribution name="s" type="21" offset="8"/>'
                    '<Attribution name="t" type="21" offset="4"/></Event>')


def test_layout_exceeding_max_frame():
    t = SchemaTable()
    s = EventSchema(1, 1, "Big", tuple(
        AttributeSpec(f"a{i}", t.type_codes[4], None) for i in range(20)))
    with pytest.raises(SchemaError):
        validate_schema(s, max_frame=64)
    validate_schema(s, max_frame=160)


def test_type_code_table():
    t = SchemaTable()
    assert t.type_codes[13].width == 8
    assert t.type_codes[22].decode_kind == COUNTED
    assert not t.type_codes[20].fixed


def test_dump_load_round_trip_default(table):
    again = load_schema(dump_schema(table))
    assert again.entries == table.entries


_FIXED = [1, 2, 3, 4, 5, 6, 13, 14]
_VAR = [20, 21, 22]


@st.composite
def tables(draw):
    base = SchemaTable()
    n = draw(st.integers(1, 6))
    keys = draw(st.lists(st.tuples(st.integers(0, 2**32 - 1), st.integers(0, 255)),
                         min_size=n, max_size=n, unique=True))
    lines = []
    for i, (prov, op) in enumerate(keys):
        codes = draw(st.lists(st.sampled_from(_FIXED + _VAR), max_size=8))
        lines.append(f'<Event guid="{prov}" opcode="{op}" name="Ev{i}">')
        cursor, fixed_so_far = 0, True
        for j, code in enumerate(codes):
            off = ""
            tc = base.type_codes[code]
            # only declare an offset where it agrees with the sequential layout
            if fixed_so_far and draw(st.booleans()):
                off = f' offset="{cursor}"'
            if tc.fixed:
                cursor += tc.width
            else:
                fixed_so_far = False
            lines.append(f'  <Attribution name="a{j}" type="{code}"{off} />')
        lines.append("</Event>")
    return "\n".join(lines)


@settings(max_examples=60, deadline=None)
@given(tables())
def test_dump_load_round_trip_property(text):
    table = load_schema(text)
    assert load_schema(dump_schema(table)).entries == table.entries
    assert dump_schema(load_schema(dump_schema(table))) == dump_schema(table)
