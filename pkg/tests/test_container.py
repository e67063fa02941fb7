import numpy as np
import pytest

from tomouq.container import ContainerError, load_arrays, save_arrays


def test_roundtrip_bitwise(tmp_path):
    rng = np.random.default_rng(0)
    arrays = {"a/w": rng.normal(size=(3, 4, 5)), "b": np.arange(7, dtype=np.float64)}
    meta = {"kind": "test", "n": 3}
    path = tmp_path / "x.tqpk"
    save_arrays(path, arrays, meta)
    loaded, loaded_meta = load_arrays(path)
    assert loaded_meta == meta
    for k in arrays:
        assert loaded[k].dtype == arrays[k].dtype
        assert np.array_equal(loaded[k], arrays[k])


def test_identical_saves_are_bitwise_identical(tmp_path):
    arrays = {"x": np.linspace(0, 1, 100)}
    p1, p2 = tmp_path / "a.tqpk", tmp_path / "b.tqpk"
    save_arrays(p1, arrays, {"seed": 1})
    save_arrays(p2, arrays, {"seed": 1})
    assert p1.read_bytes() == p2.read_bytes()


def test_bad_magic_rejected(tmp_path):
    path = tmp_path / "bad.tqpk"
    path.write_bytes(b"GARBAGE FILE CONTENT")
    with pytest.raises(ContainerError):
        load_arrays(path)


def test_corrupt_header_rejected(tmp_path):
    path = tmp_path / "c.tqpk"
    save_arrays(path, {"x": np.zeros(3)}, {})
    raw = bytearray(path.read_bytes())
    raw[12] ^= 0xFF  # flip a byte inside the JSON header
    path.write_bytes(bytes(raw))
    with pytest.raises(ContainerError):
        load_arrays(path)


def test_version_mismatch_rejected(tmp_path):
    import tomouq.container as c
    path = tmp_path / "v.tqpk"
    save_arrays(path, {"x": np.zeros(2)}, {})
    orig = c.FORMAT_VERSION
    try:
        c.FORMAT_VERSION = 99
        with pytest.raises(ContainerError, match="version"):
            load_arrays(path)
    finally:
        c.FORMAT_VERSION = orig


def test_truncated_payload_rejected(tmp_path):
    path = tmp_path / "t.tqpk"
    save_arrays(path, {"x": np.arange(100, dtype=np.float64)}, {})
    raw = path.read_bytes()
    path.write_bytes(raw[:-50])
    with pytest.raises(ContainerError, match="truncated"):
        load_arrays(path)
