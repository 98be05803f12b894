"""Outputs for enriched events: JSON lines, a framed TCP stream, behavior
triples and a typed provenance graph with DOT rendering."""
from __future__ import annotations

import bisect
import ipaddress
import json
import socket
import socketserver
import struct
import threading
from collections import Counter
from dataclasses import dataclass, field
from typing import IO, Iterable, Optional, Union

from .enrich import IMAGE_LOAD, PROCESS_END, PROCESS_START, EnrichedEvent
from .mirror import normalize_module
from .schema import COUNTED, UTF8SZ, UTF16SZ

ACK = b"\x06"
FRAME_LEN = struct.Struct(">I")

_dumps = json.JSONEncoder(ensure_ascii=False, separators=(",", ":")).encode


# -- JSON lines -----------------------------------------------------------

def record_for(ee: EnrichedEvent) -> dict:
    ev = ee.event
    lay = ev.layout
    attrs = dict(zip(lay.names, ev.values))
    for i in lay.bytes_slots:
        name = lay.names[i]
        attrs[name] = attrs[name].hex()
    for name in ee.still_unresolved:
        if name in attrs:
            attrs[name] = None
    attrs.update(ee.derived)
    return {
        "timestamp": ev.timestamp,
        "provider": ev.provider_id,
        "opcode": ev.opcode,
        "event_name": ev.event_name,
        "pid": ev.pid,
        "tid": ev.tid,
        "attrs": attrs,
        "unresolved": sorted(ee.still_unresolved),
    }


def render_jsonl_reference(ee: EnrichedEvent) -> str:
    """Straightforward encoder pass; :func:`render_jsonl` must match it byte for byte."""
    return _dumps(record_for(ee)) + "\n"


_str = json.encoder.encode_basestring  # same escaping as ensure_ascii=False
_key_cache: dict[tuple, tuple] = {}


def _keys(names: tuple) -> tuple:
    keys = _key_cache.get(names)
    if keys is None:
        keys = _key_cache[names] = tuple(_str(n) + ":" for n in names)
    return keys


def _fmt(v) -> str:
    if v is None:
        return "null"
    t = type(v)
    if t is int:
        return int.__repr__(v)
    if t is str:
        return _str(v)
    if t is bytes:
        return '"' + v.hex() + '"'
    return _dumps(v)


class _Template:
    """Attribute-object formatting for one layout when every value is present:
    integers go through ``%d``, text and bytes are escaped first."""

    __slots__ = ("fmt", "text_slots", "bytes_slots")

    def __init__(self, lay):
        keys = _keys(lay.names)
        pieces = []
        text_slots = []
        for i, (key, kind) in enumerate(zip(keys, lay.kinds)):
            if kind in (UTF16SZ, UTF8SZ):
                text_slots.append(i)
                pieces.append(key.replace("%", "%%") + "%s")
            elif kind == COUNTED:
                pieces.append(key.replace("%", "%%") + "%s")
            else:
                pieces.append(key.replace("%", "%%") + "%d")
        self.fmt = ",".join(pieces)
        self.text_slots = tuple(text_slots)
        self.bytes_slots = lay.bytes_slots

    def render(self, values) -> str:
        args = list(values)
        for i in self.text_slots:
            args[i] = _str(args[i])
        for i in self.bytes_slots:
            args[i] = '"' + args[i].hex() + '"'
        return self.fmt % tuple(args)


_templates: dict = {}


def _attrs_text(ee: EnrichedEvent) -> str:
    ev = ee.event
    lay = ev.layout
    still = ee.still_unresolved
    if not still or (len(still) == 1 and "tid" in still):
        tpl = _templates.get(lay)
        if tpl is None:
            tpl = _templates[lay] = _Template(lay)
        body = tpl.render(ev.values)
    else:
        body = ",".join(key + ("null" if name in still else _fmt(v))
                        for key, name, v in zip(_keys(lay.names), lay.names, ev.values))
    if ee.derived:
        extra = ",".join(_str(name) + ":" + _fmt(v) for name, v in ee.derived.items())
        body = body + "," + extra if body else extra
    return body


def render_jsonl(ee: EnrichedEvent) -> str:
    """One JSON line per event, formatted without building an intermediate dict."""
    ev = ee.event
    still = ee.still_unresolved
    unresolved = ",".join(_str(n) for n in sorted(still)) if still else ""
    return (f'{{"timestamp":{ev.timestamp},"provider":{ev.provider_id},'
            f'"opcode":{ev.opcode},"event_name":{_str(ev.event_name)},'
            f'"pid":{ev.pid},"tid":{ev.tid},"attrs":{{{_attrs_text(ee)}}},'
            f'"unresolved":[{unresolved}]}}\n')


class SinkError(IOError):
    def __init__(self, message: str, delivered: int):
        self.delivered = delivered
        super().__init__(f"{message} (delivered {delivered})")


def emit_jsonl(ee: EnrichedEvent, out: IO[str]) -> str:
    line = render_jsonl(ee)
    out.write(line)
    return line


class JsonlSink:
    name = "jsonl"

    def __init__(self, target: Union[str, IO[str]]):
        if isinstance(target, str):
            self._fh = open(target, "w", encoding="utf-8", newline="\n")
            self._owned = True
        else:
            self._fh = target
            self._owned = False
        self.count = 0

    def write(self, ee: EnrichedEvent, line: Optional[str] = None) -> None:
        try:
            self._fh.write(line if line is not None else render_jsonl(ee))
        except OSError as exc:
            raise SinkError(str(exc), self.count) from exc
        self.count += 1

    def close(self) -> None:
        if self._owned:
            self._fh.close()
        else:
            self._fh.flush()


# -- remote framed stream -------------------------------------------------

def parse_endpoint(endpoint) -> tuple[str, int]:
    if isinstance(endpoint, tuple):
        return endpoint
    host, _, port = str(endpoint).rpartition(":")
    if not host or not port.isdigit():
        raise ValueError(f"endpoint must be host:port, got {endpoint!r}")
    return host, int(port)


class RemoteDeliveryError(SinkError):
    """Connect or ack failure; resume with ``skip=delivered``."""


class RemoteSink:
    """One frame per record: u32 big-endian length, UTF-8 payload; the
    receiver acknowledges each frame with a single 0x06 byte."""

    name = "tcp"

    def __init__(self, endpoint, timeout: float = 5.0, skip: int = 0):
        self.endpoint = parse_endpoint(endpoint)
        self.timeout = timeout
        self.delivered = skip
        self._skip = skip
        self._seen = 0
        self._sock: Optional[socket.socket] = None

    def _connect(self):
        try:
            self._sock = socket.create_connection(self.endpoint, timeout=self.timeout)
        except OSError as exc:
            raise RemoteDeliveryError(f"connect {self.endpoint}: {exc}", self.delivered) from exc

    def send(self, payload: bytes) -> None:
        self._seen += 1
        if self._seen <= self._skip:
            return
        if self._sock is None:
            self._connect()
        try:
            self._sock.sendall(FRAME_LEN.pack(len(payload)) + payload)
            ack = self._sock.recv(1)
        except OSError as exc:
            self._drop()
            raise RemoteDeliveryError(f"send failed: {exc}", self.delivered) from exc
        if ack != ACK:
            self._drop()
            raise RemoteDeliveryError("connection closed before ack", self.delivered)
        self.delivered += 1

    def write(self, ee: EnrichedEvent, line: Optional[str] = None) -> None:
        self.send((line if line is not None else render_jsonl(ee)).encode("utf-8"))

    def _drop(self):
        if self._sock is not None:
            try:
                self._sock.close()
            finally:
                self._sock = None

    def close(self) -> None:
        self._drop()


def emit_remote(records: Iterable, endpoint, skip: int = 0, timeout: float = 5.0) -> int:
    """Send records (EnrichedEvents, str lines or bytes) and return the
    number of acknowledged frames, including the ``skip`` already delivered."""
    sink = RemoteSink(endpoint, timeout, skip)
    try:
        for rec in records:
            if isinstance(rec, EnrichedEvent):
                rec = render_jsonl(rec)
            sink.send(rec.encode("utf-8") if isinstance(rec, str) else bytes(rec))
    finally:
        sink.close()
    return sink.delivered


class FrameReceiver:
    """Loopback receiver for the framed protocol; keeps acked payloads.

    ``close_after`` makes it drop the connection after that many acked frames,
    without acknowledging the next one.
    """

    def __init__(self, host: str = "127.0.0.1", port: int = 0,
                 close_after: Optional[int] = None):
        self.payloads: list[bytes] = []
        self.close_after = close_after
        receiver = self

        class Handler(socketserver.BaseRequestHandler):
            def handle(self):
                rfile = self.request.makefile("rb")
                while True:
                    head = rfile.read(4)
                    if len(head) < 4:
                        return
                    (n,) = FRAME_LEN.unpack(head)
                    body = rfile.read(n)
                    if len(body) < n:
                        return
                    if receiver.close_after is not None and \
                            len(receiver.payloads) >= receiver.close_after:
                        return
                    receiver.payloads.append(body)
                    self.request.sendall(ACK)

        self.server = socketserver.ThreadingTCPServer((host, port), Handler)
        self.server.daemon_threads = True
        self._thread = threading.Thread(target=self.server.serve_forever, daemon=True)

    @property
    def endpoint(self) -> str:
        host, port = self.server.server_address[:2]
        return f"{host}:{port}"

    def data(self) -> bytes:
        return b"".join(self.payloads)

    def __enter__(self):
        self._thread.start()
        return self

    def __exit__(self, *exc):
        self.server.shutdown()
        self.server.server_close()


# -- behavior triples -----------------------------------------------------

TRIPLE_EVENTS = PROCESS_START | PROCESS_END


def triple_for(ee: EnrichedEvent) -> Optional[tuple[int, str, int]]:
    if ee.event_name not in TRIPLE_EVENTS:
        return None
    pid, ppid = ee.value("ProcessId"), ee.value("ParentId")
    if pid is None or ppid is None:
        return None
    return pid, ee.event_name, ppid


def emit_triples(events: Iterable[EnrichedEvent], out: IO[str]) -> tuple[int, int]:
    """Write ``pid<TAB>behavior<TAB>ppid`` lines; returns (written, skipped)."""
    sink = TriplesSink(out)
    for ee in events:
        sink.write(ee)
    return sink.count, sink.skipped


class TriplesSink:
    name = "triples"

    def __init__(self, target: Union[str, IO[str]]):
        if isinstance(target, str):
            self._fh = open(target, "w", encoding="utf-8", newline="\n")
            self._owned = True
        else:
            self._fh = target
            self._owned = False
        self.count = 0
        self.skipped = 0

    def write(self, ee: EnrichedEvent, line: Optional[str] = None) -> None:
        t = triple_for(ee)
        if t is None:
            self.skipped += 1
            return
        self._fh.write(f"{t[0]}\t{t[1]}\t{t[2]}\n")
        self.count += 1

    def close(self) -> None:
        if self._owned:
            self._fh.close()


# -- provenance graph -----------------------------------------------------

VERTEX_KINDS = ("process", "file", "registry_key", "socket", "module")
FILE_NAME_EVENTS = frozenset({"FileIOName", "FileIOFileCreate", "FileIOFileDelete", "FileIORundown"})
NET_PREFIXES = ("TcpIp", "UdpIp")
UNKNOWN_NAME = "?"


@dataclass
class ProvVertex:
    kind: str
    key: str
    first_seen: int


@dataclass(frozen=True)
class ProvEdge:
    src: tuple[str, str]
    dst: tuple[str, str]
    label: str
    timestamp: int


@dataclass
class ProvenanceGraph:
    vertices: dict[tuple[str, str], ProvVertex] = field(default_factory=dict)
    edges: list[ProvEdge] = field(default_factory=list)
    skipped: int = 0

    def vertex_set(self) -> set[tuple[str, str]]:
        return set(self.vertices)

    def edge_multiset(self) -> Counter:
        return Counter((e.src, e.dst, e.label, e.timestamp) for e in self.edges)

    def triples(self):
        """Edges projected to (src key, label, dst key)."""
        return [(e.src[1], e.label, e.dst[1]) for e in self.edges]


def _socket_key(ee: EnrichedEvent) -> Optional[str]:
    daddr, dport = ee.value("daddr"), ee.value("dport")
    if daddr is None or dport is None:
        return None
    return f"{ipaddress.IPv4Address(daddr)}:{dport}"


class GraphBuilder:
    """Streaming graph construction.

    Process identity is ``pid:name``. Names are bound when the graph is
    materialized: a reference at time t takes the name from the latest start
    of that pid at or before t, so arrival order among events sharing a
    timestamp does not change the result.
    """

    name = "graph"

    def __init__(self):
        self._starts: dict[int, list[tuple[int, str]]] = {}
        self._refs: list[tuple] = []
        self.skipped = 0

    def write(self, ee: EnrichedEvent, line: Optional[str] = None) -> None:
        name = ee.event_name
        ts = ee.timestamp
        proc = ("process", ee.pid)
        target = None
        if name in PROCESS_START:
            pid, ppid = ee.value("ProcessId"), ee.value("ParentId")
            if pid is None:
                self.skipped += 1
                return
            self._starts.setdefault(pid, []).append((ts, ee.value("ImageFileName") or UNKNOWN_NAME))
            if ppid is None:
                self.skipped += 1
                return
            proc, target = ("process", ppid), ("process", pid)
        elif name.startswith("FileIO") and name not in FILE_NAME_EVENTS:
            path = ee.value("FileName")
            if path:
                target = ("file", path)
        elif name.startswith(NET_PREFIXES):
            key = _socket_key(ee)
            if key is not None:
                proc = ("process", ee.value("PID", ee.pid))
                target = ("socket", key)
        elif name in IMAGE_LOAD:
            path = ee.value("FileName")
            if path:
                proc = ("process", ee.value("ProcessId", ee.pid))
                target = ("module", normalize_module(path))
        elif name.startswith("Registry"):
            key = ee.value("KeyName")
            if key:
                target = ("registry_key", key)
        if target is None:
            self.skipped += 1
            return
        self._refs.append((proc, target, name, ts))

    def close(self) -> None:
        pass

    def _process_key(self, pid: int, ts: int) -> str:
        starts = self._starts.get(pid)
        if starts:
            i = bisect.bisect_right(starts, (ts, "\U0010ffff")) - 1
            if i >= 0:
                return f"{pid}:{starts[i][1]}"
        return f"{pid}:{UNKNOWN_NAME}"

    def graph(self) -> ProvenanceGraph:
        for starts in self._starts.values():
            starts.sort()
        g = ProvenanceGraph(skipped=self.skipped)

        def vertex(ref, ts):
            kind, ident = ref
            key = self._process_key(ident, ts) if kind == "process" else ident
            v = g.vertices.get((kind, key))
            if v is None:
                g.vertices[(kind, key)] = ProvVertex(kind, key, ts)
            elif ts < v.first_seen:
                v.first_seen = ts
            return (kind, key)

        for src, dst, label, ts in self._refs:
            g.edges.append(ProvEdge(vertex(src, ts), vertex(dst, ts), label, ts))
        g.edges.sort(key=lambda e: (e.timestamp, e.src, e.dst, e.label))
        return g


def build_graph(events: Iterable[EnrichedEvent]) -> ProvenanceGraph:
    builder = GraphBuilder()
    for ee in events:
        builder.write(ee)
    return builder.graph()


_SHAPES = {"process": "box", "file": "note", "registry_key": "folder",
           "socket": "diamond", "module": "component"}


def _dot_quote(text: str) -> str:
    return '"' + text.replace("\\", "\\\\").replace('"', '\\"') + '"'


def render_dot(graph: ProvenanceGraph) -> str:
    order = sorted(graph.vertices, key=lambda v: (VERTEX_KINDS.index(v[0]), v[1]))
    ids = {v: f"n{i}" for i, v in enumerate(order)}
    lines = ["digraph provenance {"]
    for v in order:
        kind, key = v
        lines.append(f"  {ids[v]} [label={_dot_quote(key)}, kind={kind}, shape={_SHAPES[kind]}];")
    for e in sorted(graph.edges, key=lambda e: (e.timestamp, ids[e.src], ids[e.dst], e.label)):
        lines.append(f"  {ids[e.src]} -> {ids[e.dst]} [label={_dot_quote(e.label)}, ts={e.timestamp}];")
    lines.append("}")
    return "\n".join(lines) + "\n"


class DotSink(GraphBuilder):
    """Collects the provenance graph and writes it as DOT on close."""

    name = "dot"

    def __init__(self, target: Union[str, IO[str]]):
        super().__init__()
        self._target = target

    def close(self) -> None:
        text = render_dot(self.graph())
        if isinstance(self._target, str):
            with open(self._target, "w", encoding="utf-8", newline="\n") as fh:
                fh.write(text)
        else:
            self._target.write(text)
