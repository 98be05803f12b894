"""Independent reference implementations used as test oracles.

Nothing here imports the code under test's decoding or mapping logic; the
decoder works byte by byte and the enrichment oracle rescans the full event
history for every question instead of keeping tables.
"""
from __future__ import annotations

from kevtrace.schema import COUNTED, POINTER, SIGNED, UNSIGNED, UTF8SZ, UTF16SZ

TID_SENTINEL = 0xFFFFFFFF


# -- payload decoding -------------------------------------------------------

def _int_le(data: bytes, start: int, width: int, signed: bool) -> int:
    value = 0
    for i in range(width):
        value |= data[start + i] << (8 * i)
    if signed and value >= 1 << (8 * width - 1):
        value -= 1 << (8 * width)
    return value


def _empty(kind):
    if kind in (UTF16SZ, UTF8SZ):
        return ""
    if kind == COUNTED:
        return b""
    return 0


def _field(payload: bytes, pos: int, kind: str, width: int):
    """Return (value, next_pos) or None if the field does not fit."""
    n = len(payload)
    if kind in (UNSIGNED, SIGNED, POINTER):
        if pos + width > n:
            return None
        return _int_le(payload, pos, width, kind == SIGNED), pos + width
    if kind == UTF8SZ:
        end = pos
        while end < n and payload[end] != 0:
            end += 1
        if end >= n:
            return None
        return payload[pos:end].decode("utf-8", errors="replace"), end + 1
    if kind == UTF16SZ:
        end = pos
        while end + 1 < n and not (payload[end] == 0 and payload[end + 1] == 0):
            end += 2
        if end + 1 >= n:
            return None
        return payload[pos:end].decode("utf-16-le", errors="replace"), end + 2
    if kind == COUNTED:
        if pos + 2 > n:
            return None
        length = payload[pos] + 256 * payload[pos + 1]
        if pos + 2 + length > n:
            return None
        return payload[pos + 2:pos + 2 + length], pos + 2 + length
    raise AssertionError(kind)


def reference_decode(payload: bytes, schema):
    """Returns ({name: (value, resolved)}, unresolved set, short, trailing)."""
    out = {}
    unresolved = set()
    pos = 0
    failed = False
    for spec in schema.attributes:
        tc = spec.type_code
        if failed:
            out[spec.name] = (_empty(tc.decode_kind), False)
            unresolved.add(spec.name)
            continue
        if spec.declared_offset is not None:
            pos = spec.declared_offset
        got = _field(payload, pos, tc.decode_kind, tc.width)
        if got is None:
            failed = True
            out[spec.name] = (_empty(tc.decode_kind), False)
            unresolved.add(spec.name)
            continue
        out[spec.name], pos = (got[0], True), got[1]
    trailing = 0 if failed else max(0, len(payload) - pos)
    return out, unresolved, failed, trailing


# -- enrichment by full-history scan ---------------------------------------

IMAGE_EVENTS = ("ImageLoad", "ImageDCStart", "ImageUnload")


class History:
    """Every raw event seen so far, bucketed by kind so scans skip
    irrelevant events. No derived state is kept."""

    def __init__(self):
        self.volumes = []
        self.cswitches = []
        self.files = []
        self.images = []
        self.syscalls = []  # (position in image list, event)

    def append(self, ev):
        name = ev.event_name
        if name == "DiskIoVolumeMap":
            self.volumes.append(ev)
        elif name == "CSwitch":
            self.cswitches.append(ev)
        elif name.startswith("FileIO"):
            self.files.append(ev)
        elif name in IMAGE_EVENTS:
            self.images.append(ev)
        elif name == "SysClEnter":
            self.syscalls.append((len(self.images), ev))


def _rewrite(path, history):
    """Longest device prefix (on a component boundary) from every volume
    mapping seen so far; later mappings of one device override earlier."""
    if not isinstance(path, str) or not path.startswith("\\Device\\"):
        return None
    mapping = {}
    for ev in history.volumes:
        dev, drive = ev.value("DeviceName"), ev.value("DriveLetter")
        if dev and drive:
            mapping[dev.rstrip("\\")] = drive.rstrip("\\")
    best = None
    for dev in mapping:
        if path == dev or path.startswith(dev + "\\"):
            if best is None or len(dev) > len(best):
                best = dev
    if best is None:
        return None
    return mapping[best] + path[len(best):]


def _latest_name(history, attr, key):
    if not key:
        return None
    for ev in reversed(history.files):
        name = ev.value("FileName")
        if name and ev.value(attr) == key:
            return name
    return None


def _latest_tid(history, pid):
    for ev in reversed(history.cswitches):
        if ev.pid == pid:
            return ev.value("NewThreadId", ev.tid)
    return None


def _stem(path):
    base = path.replace("/", "\\").rsplit("\\", 1)[-1].lower()
    if "." in base[1:]:
        base = base.rsplit(".", 1)[0]
    return base


def _loaded_images(image_events, pid):
    """Images live in ``pid`` after replaying loads/unloads in order.
    Overlapping or empty loads are refused; unloads must name the same base
    (and module, when a name is given)."""
    images = []
    for ev in image_events:
        if ev.value("ProcessId", ev.pid) != pid:
            continue
        base, size = ev.value("ImageBase"), ev.value("ImageSize", 0)
        if base is None:
            continue
        path = ev.value("FileName", "")
        if ev.event_name == "ImageUnload":
            images = [img for img in images
                      if not (img[0] == base and (not path or img[2] == _stem(path)))]
            continue
        if size <= 0 or any(b < base + size and base < b + s for b, s, _ in images):
            continue
        images.append((base, size, _stem(path)))
    return images


def _symbol(images, addr, manifests):
    for base, size, module in images:
        if base <= addr < base + size:
            rva = addr - base
            m = manifests.get(module)
            best = None
            if m is not None:
                for api, start in m.exports:
                    if start <= rva and (best is None or start > best[1]):
                        best = (api, start)
            if best is None:
                return f"{module}+{rva:#x}"
            off = rva - best[1]
            return f"{module}!{best[0]}" + (f"+{off:#x}" if off else "")
    return f"{addr:#x}"


def _syscall_name(history, addr, manifests):
    """Name for ``addr`` if any SysClEnter so far hit it while a syscall
    module exporting that address was live; the latest such hit wins."""
    found = None
    for n_images, ev in history.syscalls:
        if ev.value("SysCallAddress") != addr:
            continue
        prefix = history.images[:n_images]
        live = {}
        for pid in {p.value("ProcessId", p.pid) for p in prefix}:
            for base, _, module in _loaded_images(prefix, pid):
                m = manifests.get(module)
                if m is not None and m.syscall:
                    for api, rva in m.exports:
                        live[base + rva] = api
        if addr in live:
            found = live[addr]
    return found


def brute_force(ev, history, manifests):
    """Expected corrected values for ``ev``. ``history`` must already hold
    every raw event up to and including ``ev``. Keys are the attribute names
    that should end up filled, rewritten or derived."""
    expected = {}
    if ev.tid == TID_SENTINEL:
        tid = _latest_tid(history, ev.pid)
        if tid is not None:
            expected["tid"] = tid
    if "FileName" in ev.layout.index:
        name = ev.value("FileName")
        if "FileName" in ev.unresolved:
            name = _latest_name(history, "FileObject", ev.value("FileObject"))
            if name is None:
                name = _latest_name(history, "FileKey", ev.value("FileKey"))
            if name is not None:
                expected["FileName"] = name
        if name is not None:
            rewritten = _rewrite(name, history)
            if rewritten is not None:
                expected["FileName"] = rewritten
    if ev.event_name == "StackWalk":
        pid = ev.value("StackProcess", ev.pid)
        blob = ev.value("Stack", b"")
        images = _loaded_images(history.images, pid)
        expected["StackSymbols"] = [
            _symbol(images, int.from_bytes(blob[i:i + 8], "little"), manifests)
            for i in range(0, len(blob) - 7, 8)
        ]
    if ev.event_name == "SysClEnter":
        name = _syscall_name(history, ev.value("SysCallAddress"), manifests)
        if name is not None:
            expected["SysCallName"] = name
    return expected


def recompute_latency_ms(rows, epoch, ticks_per_second=10_000_000):
    """Per-event latency in ms from ``(timestamp, _, emitted_at)`` rows."""
    return [(out - (epoch + ts / ticks_per_second)) * 1000.0 for ts, _, out in rows]


def percentile_linear(values, q):
    """Percentile with linear interpolation between closest ranks."""
    data = sorted(values)
    if not data:
        return None
    pos = (len(data) - 1) * q / 100.0
    lo = int(pos)
    hi = min(lo + 1, len(data) - 1)
    return data[lo] + (data[hi] - data[lo]) * (pos - lo)
