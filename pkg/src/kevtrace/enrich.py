"""Semantic correction of parsed events through relational mapping tables.

Each event first updates the tables it carries facts for, then any attribute
it left blank or sentinel-valued is filled from the tables. Corrections only
ever use facts from earlier events (or the event itself).

Table indexes::

     1 ProcessId2ThreadId      7 ProcessID2Name        13 ModulesName2APIs
     2 ThreadId2ProcessId      8 ProcessID2Modules     14 UsedModulesName2APIs
     3 FileObject2Name         9 Volume2Disk           15 EventPropertiesMap
     4 FileKey2Name           10 CallStackMap          16 Property2IndexMap
     5 ProcessID2ModuleAddressPair (the ApiIndex)      17 EventStructMap
     6 ProcessName2Id         11 SystemCallMap         18 Properties
                              12 SystemCallMapUsed

Tables 15-18 are built from the schema and never change afterwards.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from types import MappingProxyType
from typing import Optional

from .mirror import ApiIndex, resolve_address
from .parser import TID_SENTINEL, ParsedEvent
from .schema import SchemaTable

MAP_NAMES = {
    1: "ProcessId2ThreadId", 2: "ThreadId2ProcessId", 3: "FileObject2Name",
    4: "FileKey2Name", 5: "ProcessID2ModuleAddressPair", 6: "ProcessName2Id",
    7: "ProcessID2Name", 8: "ProcessID2Modules", 9: "Volume2Disk",
    10: "CallStackMap", 11: "SystemCallMap", 12: "SystemCallMapUsed",
    13: "ModulesName2APIs", 14: "UsedModulesName2APIs", 15: "EventPropertiesMap",
    16: "Property2IndexMap", 17: "EventStructMap", 18: "Properties",
}

PROCESS_START = frozenset({"ProcessStart", "ProcessDCStart"})
PROCESS_END = frozenset({"ProcessEnd"})
THREAD_START = frozenset({"ThreadStart", "ThreadDCStart"})
THREAD_END = frozenset({"ThreadEnd"})
IMAGE_LOAD = frozenset({"ImageLoad", "ImageDCStart"})
IMAGE_UNLOAD = frozenset({"ImageUnload"})

DEVICE_PREFIX = "\\Device\\"


class MappingStore:
    def __init__(self, table: Optional[SchemaTable] = None,
                 api_index: Optional[ApiIndex] = None):
        self.p2t: dict[int, int] = {}
        self.t2p: dict[int, int] = {}
        self.fobj2name: dict[int, str] = {}
        self.fkey2name: dict[int, str] = {}
        self.api_index = api_index if api_index is not None else ApiIndex()
        self.pname2id: dict[str, int] = {}
        self.pid2name: dict[int, str] = {}
        self.pid2modules: dict[int, set[str]] = {}
        self.volume2disk: dict[str, str] = {}
        self._rewrites: dict[str, Optional[str]] = {}  # reset by set_volume
        self.callstacks: dict[tuple[int, int], tuple[str, ...]] = {}
        self.syscalls: dict[int, str] = {}
        self.syscalls_used: dict[int, str] = {}
        self.module_apis: dict[str, tuple[str, ...]] = {}
        self.used_module_apis: dict[str, set[str]] = {}

        props, index, struct = {}, {}, {}
        for (prov, op), s in sorted((table.entries if table else {}).items()):
            names = tuple(s.attribute_names())
            props[s.event_name] = names
            for i, n in enumerate(names):
                index[(s.event_name, n)] = i
            struct[(prov, op)] = (s.event_name, names)
        self.event_properties = MappingProxyType(props)
        self.property_index = MappingProxyType(index)
        self.event_struct = MappingProxyType(struct)
        self.properties = frozenset(n for names in props.values() for n in names)

    def set_volume(self, device: str, drive: str) -> None:
        self.volume2disk[device] = drive
        self._rewrites.clear()

    def volume_rewrite(self, path: str) -> Optional[str]:
        """Longest matching device prefix replaced by its drive, or None."""
        if not path.startswith(DEVICE_PREFIX):
            return None
        cache = self._rewrites
        if path in cache:
            return cache[path]
        if len(cache) >= 4096:
            cache.clear()
        cache[path] = out = self._rewrite(path)
        return out

    def _rewrite(self, path: str) -> Optional[str]:
        best = None
        for device, drive in self.volume2disk.items():
            if path.startswith(device) and (len(path) == len(device) or path[len(device)] == "\\"):
                if best is None or len(device) > len(best):
                    best = device
        if best is None:
            return None
        return self.volume2disk[best] + path[len(best):]


@dataclass(slots=True)
class EnrichedEvent:
    """A parsed event after correction. ``derived`` holds values the raw
    frame never carried, such as symbolicated stacks."""

    event: ParsedEvent
    corrections: list[tuple[str, int]] = field(default_factory=list)
    still_unresolved: set[str] = field(default_factory=set)
    derived: dict[str, object] = field(default_factory=dict)

    @property
    def event_name(self):
        return self.event.event_name

    @property
    def pid(self):
        return self.event.pid

    @property
    def tid(self):
        return self.event.tid

    @property
    def timestamp(self):
        return self.event.timestamp

    def value(self, name, default=None):
        if name in self.derived:
            return self.derived[name]
        return self.event.value(name, default)


def _raw_name(ev: ParsedEvent) -> Optional[str]:
    return ev.value("FileName") or None


def _stack_addresses(blob: bytes) -> list[int]:
    return [int.from_bytes(blob[i:i + 8], "little") for i in range(0, len(blob) - 7, 8)]


def update_maps(store: MappingStore, ev: ParsedEvent) -> MappingStore:
    name = ev.event_name
    if name == "CSwitch":
        tid = ev.value("NewThreadId", ev.tid)
        store.p2t[ev.pid] = tid
        store.t2p[tid] = ev.pid
    elif name in THREAD_START:
        tid, pid = ev.value("TThreadId"), ev.value("ProcessId", ev.pid)
        if tid is not None:
            store.t2p[tid] = pid
    elif name in THREAD_END:
        tid = ev.value("TThreadId")
        if tid is not None and store.t2p.get(tid) == ev.value("ProcessId", ev.pid):
            del store.t2p[tid]
    elif name.startswith("FileIO"):
        fname = _raw_name(ev)
        if fname is not None:
            fobj = ev.value("FileObject")
            if fobj:
                store.fobj2name[fobj] = fname
            fkey = ev.value("FileKey")
            if fkey:
                store.fkey2name[fkey] = fname
    elif name in PROCESS_START:
        pid, pname = ev.value("ProcessId"), ev.value("ImageFileName")
        if pid is not None and pname:
            store.pid2name[pid] = pname
            store.pname2id[pname] = pid
    elif name in PROCESS_END:
        pid = ev.value("ProcessId")
        pname = store.pid2name.pop(pid, None)
        if pname is not None and store.pname2id.get(pname) == pid:
            del store.pname2id[pname]
        store.pid2modules.pop(pid, None)
    elif name in IMAGE_LOAD or name in IMAGE_UNLOAD:
        _image_event(store, ev)
    elif name == "DiskIoVolumeMap":
        dev, drive = ev.value("DeviceName"), ev.value("DriveLetter")
        if dev and drive:
            store.set_volume(dev.rstrip("\\"), drive.rstrip("\\"))
    elif name == "StackWalk":
        pid = ev.value("StackProcess", ev.pid)
        symbols = []
        for addr in _stack_addresses(ev.value("Stack", b"")):
            sym = resolve_address(store.api_index, pid, addr)
            if sym is None:
                symbols.append(f"{addr:#x}")
                continue
            symbols.append(str(sym))
            if sym.api_name is not None:
                store.used_module_apis.setdefault(sym.module_name, set()).add(sym.api_name)
        store.callstacks[(pid, ev.value("EventTimeStamp", ev.timestamp))] = tuple(symbols)
    elif name == "SysClEnter":
        addr = ev.value("SysCallAddress")
        if addr in store.syscalls:
            store.syscalls_used[addr] = store.syscalls[addr]
    return store


def _image_event(store: MappingStore, ev: ParsedEvent) -> None:
    pid = ev.value("ProcessId", ev.pid)
    base, size = ev.value("ImageBase"), ev.value("ImageSize", 0)
    path = ev.value("FileName", "")
    if base is None:
        return
    index = store.api_index
    if ev.event_name in IMAGE_LOAD:
        image = index.load(pid, path, base, size)
        if image is None:
            return
        store.pid2modules.setdefault(pid, set()).add(image.module_name)
        m = image.manifest
        if m is not None:
            store.module_apis[image.module_name] = tuple(n for n, _ in m.exports)
            if m.syscall:
                for api, rva in m.exports:
                    store.syscalls[base + rva] = api
    else:
        image = index.unload(pid, path, base)
        if image is None:
            return
        if not any(i.module_name == image.module_name for i in index.images(pid)):
            mods = store.pid2modules.get(pid)
            if mods is not None:
                mods.discard(image.module_name)
        if image.manifest is not None and image.manifest.syscall:
            for _, rva in image.manifest.exports:
                store.syscalls.pop(base + rva, None)


def lost_attributes(ev: ParsedEvent) -> set[str]:
    """Unresolved attributes plus a sentinel thread id."""
    lost = set(ev.unresolved)
    if ev.tid == TID_SENTINEL:
        lost.add("tid")
    return lost


def correct(store: MappingStore, ev: ParsedEvent) -> EnrichedEvent:
    """Fill lost attributes from the tables. Mutates ``ev`` in place."""
    fixes: list[tuple[str, int]] = []
    derived: dict[str, object] = {}
    lost_tid = ev.tid == TID_SENTINEL

    if lost_tid:
        tid = store.p2t.get(ev.pid)
        if tid is not None:
            ev.tid = tid
            fixes.append(("tid", 1))

    fi = ev.layout.index.get("FileName")
    if fi is not None:
        unresolved = ev.unresolved
        if "FileName" in unresolved:
            source = None
            fobj, fkey = ev.value("FileObject"), ev.value("FileKey")
            if fobj and fobj in store.fobj2name:
                source = (store.fobj2name[fobj], 3)
            elif fkey and fkey in store.fkey2name:
                source = (store.fkey2name[fkey], 4)
            if source is not None:
                ev.values[fi] = source[0]
                unresolved.discard("FileName")
                fixes.append(("FileName", source[1]))
        if store.volume2disk and "FileName" not in unresolved:
            rewritten = store.volume_rewrite(ev.values[fi])
            if rewritten is not None:
                ev.values[fi] = rewritten
                fixes.append(("FileName", 9))

    name = ev.event_name
    if name == "StackWalk":
        key = (ev.value("StackProcess", ev.pid), ev.value("EventTimeStamp", ev.timestamp))
        if key in store.callstacks:
            derived["StackSymbols"] = list(store.callstacks[key])
            fixes.append(("StackSymbols", 5))
    elif name == "SysClEnter":
        addr = ev.value("SysCallAddress")
        if addr in store.syscalls_used:
            derived["SysCallName"] = store.syscalls_used[addr]
            fixes.append(("SysCallName", 11))

    # ev.unresolved already lost whatever was filled above
    still = set(ev.unresolved)
    if lost_tid and ev.tid == TID_SENTINEL:
        still.add("tid")
    return EnrichedEvent(ev, fixes, still, derived)


def enrich(store: MappingStore, ev: ParsedEvent) -> EnrichedEvent:
    update_maps(store, ev)
    return correct(store, ev)


def snapshot(store: MappingStore) -> list[tuple[int, str, str]]:
    """Event-derived tables (1-14) as sorted ``(index, key, value)`` rows."""
    rows: list[tuple[int, object, str, str]] = []

    def add(idx, mapping, kfmt=str, vfmt=str):
        for k, v in mapping.items():
            rows.append((idx, k, kfmt(k), vfmt(v)))

    add(1, store.p2t)
    add(2, store.t2p)
    add(3, store.fobj2name, hex)
    add(4, store.fkey2name, hex)
    for pid in store.api_index.pids():
        for img in store.api_index.images(pid):
            rows.append((5, (pid, img.base), f"{pid}:{img.base:#x}",
                         f"{img.module_name}:{img.size:#x}"))
    add(6, store.pname2id)
    add(7, store.pid2name)
    add(8, {k: v for k, v in store.pid2modules.items() if v}, str, lambda v: ",".join(sorted(v)))
    add(9, store.volume2disk)
    add(10, store.callstacks, lambda k: f"{k[0]}:{k[1]}", ";".join)
    add(11, store.syscalls, hex)
    add(12, store.syscalls_used, hex)
    add(13, store.module_apis, str, ",".join)
    add(14, store.used_module_apis, str, lambda v: ",".join(sorted(v)))
    rows.sort(key=lambda r: (r[0], r[1]))
    return [(idx, k, v) for idx, _, k, v in rows]


def format_snapshot(rows) -> str:
    return "".join(f"map={i} key={k} value={v}\n" for i, k, v in rows)
