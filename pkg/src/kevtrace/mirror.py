"""Module export manifests and per-process address symbolication.

Manifest text::

    module kernel32 size 0xB0000
    export CreateFileW 0x1000
    export ReadFile 0x1A40

A ``syscall`` token after the size marks a module whose exports are system
call entry points.
"""
from __future__ import annotations

import bisect
import os
from importlib import resources
from dataclasses import dataclass, field
from typing import Optional


class ManifestError(ValueError):
    def __init__(self, message: str, path=None, line: int | None = None):
        self.path = path
        self.line = line
        where = f"{path}:{line}: " if path is not None else ""
        super().__init__(where + message)


def normalize_module(name: str) -> str:
    """``\\Device\\...\\System32\\KERNEL32.DLL`` and ``kernel32`` both give ``kernel32``."""
    base = name.replace("/", "\\").rsplit("\\", 1)[-1].lower()
    stem, dot, ext = base.rpartition(".")
    return stem if dot and stem else base


@dataclass
class ImageManifest:
    module_name: str
    size: int = 0
    exports: list[tuple[str, int]] = field(default_factory=list)
    syscall: bool = False

    def __post_init__(self):
        self.exports.sort(key=lambda e: e[1])
        self._rvas = [rva for _, rva in self.exports]

    def symbol_at(self, rva: int) -> Optional[tuple[str, int]]:
        """Greatest export at or below ``rva``, as (api_name, distance)."""
        i = bisect.bisect_right(self._rvas, rva) - 1
        if i < 0:
            return None
        name, start = self.exports[i]
        return name, rva - start


def parse_manifest(text: str, path=None) -> ImageManifest:
    module = None
    size = 0
    syscall = False
    exports: list[tuple[str, int]] = []
    seen_rva: dict[int, str] = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        try:
            if module is None:
                if parts[0] != "module" or len(parts) < 2:
                    raise ManifestError("first line must be 'module <name> size <hex>'", path, lineno)
                module = parts[1]
                rest = parts[2:]
                if rest[:1] == ["size"]:
                    size = int(rest[1], 16)
                    rest = rest[2:]
                if rest == ["syscall"]:
                    syscall = True
                elif rest:
                    raise ManifestError(f"unexpected tokens {rest}", path, lineno)
            elif parts[0] == "export" and len(parts) == 3:
                rva = int(parts[2], 16)
                if rva in seen_rva:
                    raise ManifestError(
                        f"duplicate rva {parts[2]} ({seen_rva[rva]}, {parts[1]})", path, lineno)
                seen_rva[rva] = parts[1]
                exports.append((parts[1], rva))
            else:
                raise ManifestError(f"cannot parse {raw.strip()!r}", path, lineno)
        except (ValueError, IndexError) as exc:
            if isinstance(exc, ManifestError):
                raise
            raise ManifestError(f"cannot parse {raw.strip()!r}", path, lineno) from None
    if module is None:
        raise ManifestError("empty manifest", path, None)
    return ImageManifest(module, size, exports, syscall)


def load_manifests(directory) -> dict[str, ImageManifest]:
    manifests = {}
    for entry in sorted(os.listdir(directory)):
        path = os.path.join(directory, entry)
        if entry.startswith(".") or not os.path.isfile(path):
            continue
        with open(path, "r", encoding="utf-8") as fh:
            m = parse_manifest(fh.read(), path)
        manifests[normalize_module(m.module_name)] = m
    return manifests


def default_manifests() -> dict[str, ImageManifest]:
    """Manifests shipped with the package."""
    folder = resources.files("kevtrace.data").joinpath("manifests")
    manifests = {}
    for entry in sorted(folder.iterdir(), key=lambda e: e.name):
        if entry.name.endswith(".txt"):
            m = parse_manifest(entry.read_text("utf-8"), entry.name)
            manifests[normalize_module(m.module_name)] = m
    return manifests


@dataclass(frozen=True)
class LoadedImage:
    pid: int
    module_name: str
    base: int
    size: int
    manifest: Optional[ImageManifest] = None

    @property
    def end(self) -> int:
        return self.base + self.size


@dataclass(frozen=True)
class Symbol:
    module_name: str
    api_name: Optional[str]
    offset: int

    def __str__(self):
        if self.api_name is None:
            return f"{self.module_name}+{self.offset:#x}"
        if self.offset:
            return f"{self.module_name}!{self.api_name}+{self.offset:#x}"
        return f"{self.module_name}!{self.api_name}"


class ApiIndex:
    """Images currently loaded per pid, kept sorted by base for bisection."""

    def __init__(self, manifests: Optional[dict[str, ImageManifest]] = None):
        self.manifests = manifests or {}
        self._bases: dict[int, list[int]] = {}
        self._images: dict[int, list[LoadedImage]] = {}
        # (pid, module) -> {api_name: absolute address}
        self.apis: dict[tuple[int, str], dict[str, int]] = {}
        self.conflicts = 0
        self.unknown_unloads = 0

    def images(self, pid: int) -> list[LoadedImage]:
        return list(self._images.get(pid, ()))

    def pids(self) -> list[int]:
        return sorted(p for p, imgs in self._images.items() if imgs)

    def load(self, pid: int, module_name: str, base: int, size: int) -> Optional[LoadedImage]:
        """Insert an image; overlapping or empty intervals are rejected and counted."""
        module = normalize_module(module_name)
        if size <= 0:
            self.conflicts += 1
            return None
        bases = self._bases.setdefault(pid, [])
        images = self._images.setdefault(pid, [])
        i = bisect.bisect_right(bases, base)
        if i > 0 and images[i - 1].end > base:
            self.conflicts += 1
            return None
        if i < len(bases) and bases[i] < base + size:
            self.conflicts += 1
            return None
        image = LoadedImage(pid, module, base, size, self.manifests.get(module))
        bases.insert(i, base)
        images.insert(i, image)
        if image.manifest is not None:
            self.apis[(pid, module)] = {n: base + rva for n, rva in image.manifest.exports}
        return image

    def unload(self, pid: int, module_name: str, base: int) -> Optional[LoadedImage]:
        bases = self._bases.get(pid, [])
        i = bisect.bisect_left(bases, base)
        if i == len(bases) or bases[i] != base:
            self.unknown_unloads += 1
            return None
        image = self._images[pid][i]
        if module_name and normalize_module(module_name) != image.module_name:
            self.unknown_unloads += 1
            return None
        del bases[i]
        del self._images[pid][i]
        if not any(img.module_name == image.module_name for img in self._images[pid]):
            self.apis.pop((pid, image.module_name), None)
        return image

    def image_at(self, pid: int, address: int) -> Optional[LoadedImage]:
        bases = self._bases.get(pid)
        if not bases:
            return None
        i = bisect.bisect_right(bases, address) - 1
        if i < 0:
            return None
        image = self._images[pid][i]
        return image if address < image.end else None

    def state(self) -> tuple:
        """Canonical view used for equality checks."""
        return tuple(
            (img.pid, img.module_name, img.base, img.size)
            for pid in sorted(self._images) for img in self._images[pid]
        )

    def __eq__(self, other):
        if not isinstance(other, ApiIndex):
            return NotImplemented
        return self.state() == other.state()


def resolve_address(index: ApiIndex, pid: int, address: int) -> Optional[Symbol]:
    image = index.image_at(pid, address)
    if image is None:
        return None
    rva = address - image.base
    hit = image.manifest.symbol_at(rva) if image.manifest is not None else None
    if hit is None:
        return Symbol(image.module_name, None, rva)
    return Symbol(image.module_name, hit[0], hit[1])


IMAGE_LOAD_EVENTS = frozenset({"ImageLoad", "ImageDCStart"})
IMAGE_UNLOAD_EVENTS = frozenset({"ImageUnload"})


def on_image_event(index: ApiIndex, event) -> ApiIndex:
    pid = event.value("ProcessId", event.pid)
    base = event.value("ImageBase")
    size = event.value("ImageSize", 0)
    name = event.value("FileName", "")
    if base is None:
        return index
    if event.event_name in IMAGE_LOAD_EVENTS:
        index.load(pid, name, base, size)
    elif event.event_name in IMAGE_UNLOAD_EVENTS:
        index.unload(pid, name, base)
    return index
