import pytest
from hypothesis import given, settings, strategies as st

from kevtrace.mirror import (
    ApiIndex,
    ImageManifest,
    ManifestError,
    load_manifests,
    normalize_module,
    parse_manifest,
    resolve_address,
)


def test_normalize_module():
    assert normalize_module("\\Device\\HarddiskVolume1\\Windows\\System32\\KERNEL32.DLL") == "kernel32"
    assert normalize_module("ntdll") == "ntdll"
    assert normalize_module("C:/x/y/samlib.dll") == "samlib"
    assert normalize_module(".hidden") == ".hidden"


def test_parse_manifest():
    m = parse_manifest("# comment\nmodule demo.dll size 2000\nexport B 0x200\nexport A 100\n")
    assert m.module_name == "demo.dll" and m.size == 0x2000
    assert m.exports == [("A", 0x100), ("B", 0x200)]
    assert m.symbol_at(0x150) == ("A", 0x50)
    assert m.symbol_at(0x200) == ("B", 0)
    assert m.symbol_at(0x10) is None
    assert not m.syscall
    assert parse_manifest("module k size 10 syscall\n").syscall


@pytest.mark.parametrize("text", [
    "",
    "export A 10\n",
    "module x\nexport A zz\n",
    "module x\nexport A 10\nexport B 10\n",
    "module x size 10 extra\n",
    "module x\nbogus\n",
])
def test_bad_manifests(text):
    with pytest.raises(ManifestError):
        parse_manifest(text, "m.txt")


def test_manifest_error_has_location():
    with pytest.raises(ManifestError) as exc:
        parse_manifest("module x\nexport A 10\nexport A2 10\n", "m.txt")
    assert exc.value.line == 3 and "m.txt:3" in str(exc.value)


def test_load_manifest_directory(tmp_path):
    (tmp_path / "a.txt").write_text("module Alpha.DLL\nexport F 10\n")
    (tmp_path / ".skip").write_text("garbage")
    ms = load_manifests(tmp_path)
    assert list(ms) == ["alpha"]


def test_default_manifests(manifests):
    assert {"kernel32", "ntdll", "ntoskrnl", "samlib"} <= set(manifests)
    assert manifests["ntoskrnl"].syscall


def test_load_rejects_overlap_and_empty():
    idx = ApiIndex()
    assert idx.load(1, "a.dll", 0x1000, 0x100) is not None
    assert idx.load(1, "b.dll", 0x10FF, 0x10) is None
    assert idx.load(1, "c.dll", 0x0F80, 0x100) is None
    assert idx.load(1, "d.dll", 0x3000, 0) is None
    assert idx.conflicts == 3
    # other pids are independent
    assert idx.load(2, "b.dll", 0x1000, 0x100) is not None


def test_unload_requires_matching_base_and_module():
    idx = ApiIndex()
    idx.load(1, "a.dll", 0x1000, 0x100)
    assert idx.unload(1, "a.dll", 0x1001) is None
    assert idx.unload(1, "b.dll", 0x1000) is None
    assert idx.unknown_unloads == 2
    assert idx.unload(1, "A.DLL", 0x1000).module_name == "a"
    assert idx.images(1) == []


def test_resolve_address():
    m = ImageManifest("demo", 0x1000, [("Open", 0x100), ("Close", 0x400)])
    idx = ApiIndex({"demo": m})
    idx.load(9, "c:\\demo.dll", 0x10000, 0x1000)
    idx.load(9, "other.dll", 0x20000, 0x1000)
    assert str(resolve_address(idx, 9, 0x10100)) == "demo!Open"
    assert str(resolve_address(idx, 9, 0x10480)) == "demo!Close+0x80"
    assert str(resolve_address(idx, 9, 0x10010)) == "demo+0x10"
    assert str(resolve_address(idx, 9, 0x20010)) == "other+0x10"
    assert resolve_address(idx, 9, 0x11000) is None
    assert resolve_address(idx, 8, 0x10100) is None
    assert idx.apis[(9, "demo")] == {"Open": 0x10100, "Close": 0x10400}


ops = st.lists(st.tuples(
    st.sampled_from(["load", "unload"]),
    st.integers(1, 3),
    st.sampled_from(["a.dll", "b.dll", "c.dll"]),
    st.integers(0, 40).map(lambda x: x * 0x100),
    st.integers(0, 8).map(lambda x: x * 0x100),
), max_size=60)


@settings(max_examples=200, deadline=None)
@given(ops)
def test_loaded_images_never_overlap(sequence):
    idx = ApiIndex()
    for op, pid, mod, base, size in sequence:
        if op == "load":
            idx.load(pid, mod, base, size)
        else:
            idx.unload(pid, mod, base)
        for p in idx.pids():
            imgs = idx.images(p)
            assert [i.base for i in imgs] == sorted(i.base for i in imgs)
            for a, b in zip(imgs, imgs[1:]):
                assert a.end <= b.base
            for img in imgs:
                assert img.size > 0
                assert idx.image_at(p, img.base) == img
                assert idx.image_at(p, img.end - 1) == img
