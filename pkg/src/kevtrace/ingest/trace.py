"""KTRC binary trace container: a header plus length-prefixed event frames.

Layout (little-endian)::

    header   magic b"KTRC", version u32 (=1)
    frame    timestamp u64, provider_id 16 bytes, opcode u8, pad 3,
             pid u32, tid u32, payload_len u32, payload
"""
from __future__ import annotations

import struct
from dataclasses import dataclass
from typing import Iterable, Iterator

from ..schema import DEFAULT_MAX_FRAME

MAGIC = b"KTRC"
VERSION = 1
FILE_HEADER = struct.Struct("<4sI")
FRAME_HEADER = struct.Struct("<Q16sB3xIII")


@dataclass(frozen=True, slots=True)
class RawEvent:
    timestamp: int
    provider_id: int
    opcode: int
    pid: int
    tid: int
    payload: bytes = b""


class TraceFormatError(ValueError):
    pass


class TraceIntegrityError(ValueError):
    def __init__(self, message: str, offset: int):
        self.offset = offset
        super().__init__(f"{message} at byte offset {offset}")


class TraceWriteError(IOError):
    """Writing stopped early; ``written`` frames made it to the file."""

    def __init__(self, message: str, written: int):
        self.written = written
        super().__init__(f"{message} (after {written} frames)")


def pack_frame(event: RawEvent) -> bytes:
    return FRAME_HEADER.pack(
        event.timestamp,
        event.provider_id.to_bytes(16, "little"),
        event.opcode,
        event.pid,
        event.tid,
        len(event.payload),
    ) + event.payload


def write_trace(path, events: Iterable[RawEvent], max_frame: int = DEFAULT_MAX_FRAME) -> int:
    written = 0
    try:
        with open(path, "wb") as fh:
            fh.write(FILE_HEADER.pack(MAGIC, VERSION))
            for event in events:
                if len(event.payload) > max_frame:
                    raise TraceWriteError(
                        f"event {written} payload of {len(event.payload)} bytes "
                        f"exceeds max frame {max_frame}", written)
                fh.write(pack_frame(event))
                written += 1
    except TraceWriteError:
        raise
    except OSError as exc:
        raise TraceWriteError(str(exc), written) from exc
    return written


class TraceReader:
    """Sequential frame reader. ``count`` is final once iteration finishes.

    Timestamps that go backwards are counted in ``out_of_order``; frames are
    never reordered.
    """

    def __init__(self, path, max_frame: int = DEFAULT_MAX_FRAME):
        self.path = path
        self.max_frame = max_frame
        self.count = 0
        self.out_of_order = 0
        with open(path, "rb") as fh:
            head = fh.read(FILE_HEADER.size)
        if len(head) < FILE_HEADER.size:
            raise TraceFormatError(f"{path}: file shorter than header")
        magic, version = FILE_HEADER.unpack(head)
        if magic != MAGIC:
            raise TraceFormatError(f"{path}: bad magic {magic!r}")
        if version != VERSION:
            raise TraceFormatError(f"{path}: unsupported version {version}")

    def __iter__(self) -> Iterator[RawEvent]:
        self.count = 0
        self.out_of_order = 0
        last_ts = 0
        hsize = FRAME_HEADER.size
        unpack = FRAME_HEADER.unpack_from
        with open(self.path, "rb") as fh:
            fh.seek(FILE_HEADER.size)
            offset = FILE_HEADER.size
            while True:
                head = fh.read(hsize)
                if not head:
                    return
                if len(head) < hsize:
                    raise TraceIntegrityError("truncated frame header", offset + len(head))
                ts, prov, opcode, pid, tid, plen = unpack(head)
                if plen > self.max_frame:
                    raise TraceIntegrityError(f"payload length {plen} exceeds max frame", offset)
                payload = fh.read(plen)
                if len(payload) < plen:
                    raise TraceIntegrityError(
                        "truncated frame payload", offset + hsize + len(payload))
                if ts < last_ts:
                    self.out_of_order += 1
                last_ts = max(last_ts, ts)
                offset += hsize + plen
                self.count += 1
                yield RawEvent(ts, int.from_bytes(prov, "little"), opcode, pid, tid, payload)


def open_trace(path, max_frame: int = DEFAULT_MAX_FRAME) -> TraceReader:
    return TraceReader(path, max_frame)
