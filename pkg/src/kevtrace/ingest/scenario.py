"""Scenario scripts and the synthetic event generator.

A script is UTF-8 text, one action per line::

    at=0   action=process-start pid=100 ppid=1 name=cmd.exe
    at=5   action=file-write pid=100 tid=101 fobj=0xAB size=512

``at`` is in milliseconds. Blank lines and ``#`` comments are ignored.
Values containing spaces may be double-quoted; backslashes are literal.
"""
from __future__ import annotations

import functools
import ipaddress
import random
import shlex
import time
from importlib import resources
from dataclasses import dataclass, field
from typing import Iterator, Optional

from .. import parser as _parser
from ..mirror import default_manifests
from ..schema import SchemaTable, default_schema
from .trace import RawEvent

TICKS_PER_MS = 10_000
TICKS_PER_SECOND = 10_000_000


class ScriptError(ValueError):
    pass


@dataclass
class Action:
    at_ms: int
    kind: str
    params: dict[str, str] = field(default_factory=dict)
    line: int = 0


@dataclass
class ScenarioScript:
    actions: list[Action] = field(default_factory=list)

    def __len__(self):
        return len(self.actions)


def parse_script(text: str) -> ScenarioScript:
    actions = []
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        lexer = shlex.shlex(line, posix=True)
        lexer.whitespace_split = True
        lexer.escape = ""
        lexer.commenters = ""
        try:
            tokens = list(lexer)
        except ValueError as exc:
            raise ScriptError(f"line {lineno}: {exc}") from None
        params = {}
        for tok in tokens:
            key, sep, value = tok.partition("=")
            if not sep:
                raise ScriptError(f"line {lineno}: expected key=value, got {tok!r}")
            params[key] = value
        try:
            at = int(params.pop("at"))
            kind = params.pop("action")
        except KeyError as exc:
            raise ScriptError(f"line {lineno}: missing {exc.args[0]!r}") from None
        except ValueError:
            raise ScriptError(f"line {lineno}: 'at' must be an integer") from None
        actions.append(Action(at, kind, params, lineno))
    script = ScenarioScript(actions)
    validate_script(script)
    return script


def load_script(path) -> ScenarioScript:
    with open(path, "r", encoding="utf-8") as fh:
        return parse_script(fh.read())


def builtin_scenarios() -> list[str]:
    folder = resources.files("kevtrace.data").joinpath("scenarios")
    return sorted(e.name[:-4] for e in folder.iterdir() if e.name.endswith(".txt"))


def builtin_script(name: str) -> ScenarioScript:
    """Scenario shipped with the package, by stem (``net_user``)."""
    entry = resources.files("kevtrace.data").joinpath("scenarios", f"{name}.txt")
    if not entry.is_file():
        raise ScriptError(f"no built-in scenario {name!r}; have {', '.join(builtin_scenarios())}")
    return parse_script(entry.read_text("utf-8"))


def format_script(script: ScenarioScript) -> str:
    lines = []
    for a in script.actions:
        parts = [f"at={a.at_ms}", f"action={a.kind}"]
        for k, v in a.params.items():
            v = str(v)
            parts.append(f'{k}="{v}"' if (" " in v or not v) else f"{k}={v}")
        lines.append(" ".join(parts))
    return "\n".join(lines) + ("\n" if lines else "")


def _int(params, key, default=None):
    raw = params.get(key)
    if raw is None:
        if default is None:
            raise KeyError(key)
        return default
    return int(raw, 0)


def _ip(text) -> int:
    return int(ipaddress.IPv4Address(text))


# action kind -> event name
_FILE_OPS = {
    "file-create": "FileIOCreate", "file-read": "FileIORead", "file-write": "FileIOWrite",
    "file-close": "FileIOClose", "file-cleanup": "FileIOCleanup",
    "file-delete": "FileIODelete", "file-rename": "FileIORename",
}
_REG_OPS = {
    "registry-create": "RegistryCreate", "registry-open": "RegistryOpen",
    "registry-query": "RegistryQuery", "registry-query-value": "RegistryQueryValue",
    "registry-set-value": "RegistrySetValue", "registry-delete": "RegistryDelete",
}
_NET_OPS = {
    "tcp-connect": "TcpIpConnect", "tcp-send": "TcpIpSend", "tcp-recv": "TcpIpRecv",
    "tcp-disconnect": "TcpIpDisconnect", "tcp-accept": "TcpIpAccept",
    "udp-send": "UdpIpSend", "udp-recv": "UdpIpRecv",
}
ACTION_KINDS = frozenset(
    {"volume-map", "process-start", "process-end", "thread-start", "thread-end",
     "cswitch", "file-name", "file-key", "image-load", "image-unload", "syscall",
     "stackwalk", "disk-read", "disk-write", "raw"}
    | set(_FILE_OPS) | set(_REG_OPS) | set(_NET_OPS)
)


def validate_script(script: ScenarioScript) -> None:
    for a in script.actions:
        if a.kind not in ACTION_KINDS:
            raise ScriptError(f"line {a.line}: unknown action kind {a.kind!r}")


class _Expander:
    def __init__(self, table: SchemaTable, seed: int):
        self.table = table
        self.rng = random.Random(seed)
        self.by_name = {s.event_name: s for s in table.entries.values()}

    def frame(self, name, pid, tid, values, omit_from=None):
        schema = self.by_name[name]
        payload = _parser.encode_payload(schema, values, omit_from)
        return (schema.provider_id, schema.opcode, pid, tid, payload)

    def ptr(self):
        return 0xFFFF800000000000 | (self.rng.getrandbits(40) << 3)

    def expand(self, a: Action) -> list[tuple]:
        p = a.params
        k = a.kind
        r = self.rng
        if k == "volume-map":
            return [self.frame("DiskIoVolumeMap", 0, 0,
                               {"DeviceName": p["device"], "DriveLetter": p["drive"]})]
        if k in ("process-start", "process-end"):
            pid, ppid = _int(p, "pid"), _int(p, "ppid", 0)
            values = {
                "UniqueProcessKey": self.ptr(), "ProcessId": pid, "ParentId": ppid,
                "SessionId": _int(p, "session", 1), "ExitStatus": _int(p, "status", 0),
                "ImageFileName": p.get("name", ""), "CommandLine": p.get("cmd", ""),
            }
            name = "ProcessStart" if k == "process-start" else "ProcessEnd"
            return [self.frame(name, ppid if k == "process-start" else pid,
                               _int(p, "tid", 0), values)]
        if k in ("thread-start", "thread-end"):
            pid, tid = _int(p, "pid"), _int(p, "tid")
            name = "ThreadStart" if k == "thread-start" else "ThreadEnd"
            return [self.frame(name, pid, tid, {
                "ProcessId": pid, "TThreadId": tid,
                "StackBase": self.ptr(), "StackLimit": self.ptr()})]
        if k == "cswitch":
            pid, tid = _int(p, "pid"), _int(p, "tid")
            return [self.frame("CSwitch", pid, tid, {
                "NewThreadId": tid, "OldThreadId": _int(p, "old", 0),
                "NewThreadPriority": r.randrange(1, 16), "OldThreadPriority": r.randrange(1, 16),
                "NewThreadWaitTime": r.randrange(0, 100)})]
        if k == "file-name":
            return [self.frame("FileIOName", _int(p, "pid", 0), _int(p, "tid", 0),
                               {"FileObject": _int(p, "fobj"), "FileName": p["path"]})]
        if k == "file-key":
            return [self.frame("FileIORundown", _int(p, "pid", 0), _int(p, "tid", 0),
                               {"FileKey": _int(p, "key"), "FileName": p["path"]})]
        if k in _FILE_OPS:
            pid, tid = _int(p, "pid"), _int(p, "tid", 0)
            values = {
                "IrpPtr": self.ptr(), "FileObject": _int(p, "fobj", 0),
                "FileKey": _int(p, "key", 0), "TTID": tid,
                "Offset": _int(p, "offset", 0), "IoSize": _int(p, "size", 0),
                "CreateOptions": _int(p, "options", 0x01000020), "ShareAccess": 7,
                "InfoClass": 10 if k == "file-rename" else 13,
            }
            omit = None
            if "path" in p:
                values["FileName"] = p["path"]
            else:
                omit = "FileName"
            return [self.frame(_FILE_OPS[k], pid, tid, values, omit)]
        if k in _REG_OPS:
            pid, tid = _int(p, "pid"), _int(p, "tid", 0)
            values = {
                "InitialTime": r.getrandbits(48), "Status": _int(p, "status", 0),
                "Index": _int(p, "index", 0), "KeyHandle": self.ptr(),
                "KeyObject": self.ptr(), "Disposition": 1, "KeyName": p.get("key", ""),
            }
            return [self.frame(_REG_OPS[k], pid, tid, values)]
        if k in _NET_OPS:
            pid = _int(p, "pid")
            values = {
                "PID": pid, "size": _int(p, "size", 0),
                "daddr": _ip(p.get("daddr", "0.0.0.0")), "saddr": _ip(p.get("saddr", "127.0.0.1")),
                "dport": _int(p, "dport", 0), "sport": _int(p, "sport", 49152 + r.randrange(16000)),
            }
            # the kernel network provider never reports the issuing thread
            return [self.frame(_NET_OPS[k], pid, _parser.TID_SENTINEL, values)]
        if k in ("image-load", "image-unload"):
            pid = _int(p, "pid")
            name = "ImageLoad" if k == "image-load" else "ImageUnload"
            return [self.frame(name, pid, _int(p, "tid", 0), {
                "ImageBase": _int(p, "base"), "ImageSize": _int(p, "size"),
                "ProcessId": pid, "ImageCheckSum": r.getrandbits(32),
                "TimeDateStamp": r.getrandbits(31), "FileName": p["path"]})]
        if k == "syscall":
            return [self.frame("SysClEnter", _int(p, "pid"), _int(p, "tid", 0),
                               {"SysCallAddress": _int(p, "addr")})]
        if k == "stackwalk":
            pid, tid = _int(p, "pid"), _int(p, "tid", 0)
            addrs = [int(x, 0) for x in p.get("addrs", "").split(",") if x]
            stack = b"".join(x.to_bytes(8, "little") for x in addrs)
            return [self.frame("StackWalk", pid, tid, {
                "EventTimeStamp": _int(p, "ts", 0), "StackProcess": pid,
                "StackThread": tid, "Stack": stack})]
        if k in ("disk-read", "disk-write"):
            name = "DiskIoRead" if k == "disk-read" else "DiskIoWrite"
            return [self.frame(name, _int(p, "pid", 0), _int(p, "tid", 0), {
                "DiskNumber": 0, "TransferSize": _int(p, "size", 4096),
                "ByteOffset": r.getrandbits(30) * 512, "FileObject": _int(p, "fobj", 0),
                "Irp": self.ptr(), "HighResResponseTime": r.getrandbits(20)})]
        if k == "raw":
            return [(_int(p, "provider"), _int(p, "opcode"), _int(p, "pid", 0),
                     _int(p, "tid", 0), bytes.fromhex(p.get("payload", "")))]
        raise ScriptError(f"line {a.line}: unknown action kind {k!r}")


def expand(script: ScenarioScript, seed: int = 0,
           table: Optional[SchemaTable] = None) -> list[RawEvent]:
    """Expand a script using its own ``at`` timing.

    Frames produced by one action (``repeat=N``) are one tick apart; actions
    are stably ordered by ``at`` so timestamps never decrease.
    """
    validate_script(script)
    table = table or default_schema()
    ex = _Expander(table, seed)
    events = []
    last = 0
    for a in sorted(script.actions, key=lambda a: a.at_ms):
        ts = max(a.at_ms * TICKS_PER_MS, last)
        for _ in range(_int(a.params, "repeat", 1)):
            for prov, op, pid, tid, payload in ex.expand(a):
                events.append(RawEvent(ts, prov, op, pid, tid, payload))
                last = ts
                ts += 1
    return events


class TimedStream:
    """Iterable of RawEvents spaced ``1/rate`` seconds apart in logical time.

    The expanded script is replayed cyclically until ``count`` events (default:
    one pass). With ``realtime`` the iterator sleeps so event ``k`` is not
    released before ``epoch + k/rate``; ``epoch`` is set when iteration starts.
    """

    def __init__(self, script: ScenarioScript, seed: int, rate: float,
                 count: Optional[int] = None, realtime: bool = False,
                 table: Optional[SchemaTable] = None):
        if rate <= 0:
            raise ValueError("rate must be positive")
        self.template = expand(script, seed, table)
        self.rate = rate
        self.count = len(self.template) if count is None else count
        self.realtime = realtime
        self.epoch: Optional[float] = None

    def timestamp(self, k: int) -> int:
        return int(k * TICKS_PER_SECOND // self.rate)

    def __iter__(self) -> Iterator[RawEvent]:
        template = self.template
        if not template:
            return
        n = len(template)
        rate = self.rate
        self.epoch = time.perf_counter()
        for k in range(self.count):
            if self.realtime and k % 64 == 0:
                delay = self.epoch + k / rate - time.perf_counter()
                if delay > 0:
                    time.sleep(delay)
            t = template[k % n]
            yield RawEvent(self.timestamp(k), t.provider_id, t.opcode, t.pid, t.tid, t.payload)


def generate(script: ScenarioScript, seed: int, rate: float, count: Optional[int] = None,
             realtime: bool = False, table: Optional[SchemaTable] = None) -> TimedStream:
    validate_script(script)
    return TimedStream(script, seed, rate, count, realtime, table)


_IMAGE_NAMES = ("kernel32.dll", "ntdll.dll", "samlib.dll", "custom.dll")
_KERNEL_BASE = 0xFFFFF80000000000


@functools.lru_cache(maxsize=1)
def _kernel_rvas() -> tuple[int, ...]:
    return tuple(rva for _, rva in default_manifests()["ntoskrnl"].exports)


def random_script(seed: int, n_actions: int, benign_pids=(4, 148)) -> ScenarioScript:
    """A mixed random workload exercising every correction path.

    Some reads hit file objects that were never named and some connections
    come from processes with no context switch yet, so not every sentinel is
    correctable.
    """
    r = random.Random(seed)
    actions: list[Action] = []
    at = 0
    volumes = []
    for i in range(1, 3):
        dev = f"\\Device\\HarddiskVolume{i}"
        drive = "CD"[i - 1] + ":"
        volumes.append(dev)
        actions.append(Action(at, "volume-map", {"device": dev, "drive": drive}))
    actions.append(Action(at, "image-load", {
        "pid": "0", "base": hex(_KERNEL_BASE), "size": "0xA4F000",
        "path": "\\SystemRoot\\system32\\ntoskrnl.exe"}))
    procs: dict[int, str] = {}
    images: dict[int, list[tuple[int, str]]] = {}
    fobjs: list[int] = []
    fkeys: list[int] = []
    next_pid = 1000
    while len(actions) < n_actions:
        at += r.randrange(0, 3)
        roll = r.random()
        if roll < 0.06 or not procs:
            pid = next_pid
            next_pid += 4
            ppid = r.choice(list(procs)) if procs else 1
            name = r.choice(["cmd.exe", "powershell.exe", "net.exe", "svchost.exe", "a.exe"])
            procs[pid] = name
            actions.append(Action(at, "process-start", {"pid": str(pid), "ppid": str(ppid),
                                                        "name": name, "cmd": f"{name} /c {pid}"}))
            continue
        pid = r.choice(list(procs))
        tid = pid + r.randrange(1, 4)
        if roll < 0.16:
            actions.append(Action(at, "cswitch", {"pid": str(pid), "tid": str(tid)}))
        elif roll < 0.2:
            actions.append(Action(at, r.choice(["thread-start", "thread-end"]),
                                  {"pid": str(pid), "tid": str(tid)}))
        elif roll < 0.28:
            fobj = 0xFFFFA00000000000 + r.randrange(1 << 20) * 16
            fobjs.append(fobj)
            path = f"{r.choice(volumes)}\\dir{r.randrange(5)}\\f{len(fobjs)}.txt"
            actions.append(Action(at, "file-name", {"fobj": hex(fobj), "path": path}))
        elif roll < 0.32:
            key = 0xFFFFC00000000000 + r.randrange(1 << 20) * 16
            fkeys.append(key)
            path = f"{r.choice(volumes)}\\keyed\\k{len(fkeys)}.dat"
            actions.append(Action(at, "file-key", {"key": hex(key), "path": path}))
        elif roll < 0.52:
            kind = r.choice(["file-read", "file-write", "file-create", "file-close"])
            params = {"pid": str(pid), "tid": str(tid), "size": str(r.randrange(1, 65536))}
            if fobjs and r.random() < 0.8:
                params["fobj"] = hex(r.choice(fobjs))
            else:
                params["fobj"] = hex(0xFFFFB00000000000 + r.randrange(1 << 20))
            if fkeys and r.random() < 0.3 and kind in ("file-read", "file-write", "file-close"):
                params["key"] = hex(r.choice(fkeys))
            if r.random() < 0.1:
                params["path"] = f"{r.choice(volumes)}\\explicit\\e{r.randrange(100)}.log"
            actions.append(Action(at, kind, params))
        elif roll < 0.64:
            actions.append(Action(at, r.choice(["tcp-connect", "tcp-send", "tcp-recv", "udp-send"]), {
                "pid": str(pid), "daddr": f"10.0.{r.randrange(4)}.{r.randrange(1, 255)}",
                "dport": str(r.choice([80, 443, 445, 8080])), "size": str(r.randrange(2000))}))
        elif roll < 0.72:
            actions.append(Action(at, r.choice(sorted(_REG_OPS)), {
                "pid": str(pid), "tid": str(tid),
                "key": f"\\REGISTRY\\MACHINE\\SOFTWARE\\k{r.randrange(20)}"}))
        elif roll < 0.76:
            actions.append(Action(at, "process-end", {"pid": str(pid), "ppid": "1",
                                                      "name": procs.pop(pid)}))
        elif roll < 0.78:
            actions.append(Action(at, "disk-read", {"pid": str(pid), "tid": str(tid)}))
        elif roll < 0.81:
            module = r.choice(_IMAGE_NAMES)
            base = 0x7FF800000000 + r.randrange(48) * 0x40000
            size = r.choice([0x2C000, 0x40000, 0xB2000])
            images.setdefault(pid, []).append((base, module))
            actions.append(Action(at, "image-load", {
                "pid": str(pid), "base": hex(base), "size": hex(size),
                "path": f"\\Device\\HarddiskVolume1\\Windows\\System32\\{module}"}))
        elif roll < 0.82:
            loaded = images.get(pid)
            if loaded and r.random() < 0.8:
                base, module = loaded.pop(r.randrange(len(loaded)))
            else:
                base, module = 0x7FF800000000 + r.randrange(48) * 0x40000, r.choice(_IMAGE_NAMES)
            actions.append(Action(at, "image-unload", {
                "pid": str(pid), "base": hex(base), "size": "0x1000", "path": module}))
        elif roll < 0.84:
            addrs = []
            for _ in range(r.randrange(0, 5)):
                loaded = images.get(pid)
                if loaded and r.random() < 0.7:
                    addrs.append(r.choice(loaded)[0] + r.randrange(0x30000))
                else:
                    addrs.append(r.getrandbits(47))
            actions.append(Action(at, "stackwalk", {
                "pid": str(pid), "tid": str(tid), "ts": str(r.getrandbits(40)),
                "addrs": ",".join(hex(a) for a in addrs)}))
        elif roll < 0.86:
            if r.random() < 0.8:
                addr = _KERNEL_BASE + r.choice(_kernel_rvas())
            else:
                addr = _KERNEL_BASE + r.randrange(0x1000)
            actions.append(Action(at, "syscall", {"pid": str(pid), "tid": str(tid),
                                                  "addr": hex(addr)}))
        elif roll < 0.90:
            actions.append(Action(at, "raw", {"provider": str(0xDEAD0000 + r.randrange(4)),
                                              "opcode": str(r.randrange(256)), "pid": str(pid),
                                              "payload": r.randbytes(r.randrange(0, 12)).hex()}))
        else:
            bpid = r.choice(benign_pids)
            actions.append(Action(at, "registry-query-value", {
                "pid": str(bpid), "tid": str(bpid + 4),
                "key": "\\REGISTRY\\MACHINE\\SYSTEM\\CurrentControlSet"}))
    return ScenarioScript(actions[:n_actions])
