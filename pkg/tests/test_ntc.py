"""NTC container round-trips."""

import numpy as np
import pytest

from zestdiff.ntc import read_ntc, write_ntc


def test_roundtrip_bit_exact(tmp_path):
    rng = np.random.default_rng(0)
    arrays = {
        "a/weights": rng.normal(size=(3, 4)).astype(np.float32),
        "b": rng.normal(size=(7,)).astype(np.float64),
        "c/ids": rng.integers(0, 100, size=(2, 5)).astype(np.int64),
        "d/mask": (rng.uniform(size=(4, 4)) > 0.5).astype(np.uint8),
    }
    meta = {"nested": {"x": 1}, "list": [1, 2, 3], "s": "hello"}
    path = tmp_path / "test.ntc"
    write_ntc(path, arrays, meta=meta)
    back, meta2 = read_ntc(path)
    assert meta2 == meta
    assert set(back) == set(arrays)
    for k in arrays:
        assert back[k].dtype == arrays[k].dtype
        np.testing.assert_array_equal(back[k], arrays[k])


def test_write_is_byte_deterministic(tmp_path):
    arrays = {"z": np.ones((2, 2), dtype=np.float32),
              "a": np.zeros(3, dtype=np.float64)}
    p1, p2 = tmp_path / "one.ntc", tmp_path / "two.ntc"
    write_ntc(p1, arrays, meta={"k": 1})
    write_ntc(p2, dict(reversed(list(arrays.items()))), meta={"k": 1})
    assert p1.read_bytes() == p2.read_bytes()


def test_bad_magic_rejected(tmp_path):
    p = tmp_path / "bad.ntc"
    p.write_bytes(b"NOPE" + b"\x00" * 16)
    with pytest.raises(ValueError, match="magic"):
        read_ntc(p)


def test_unsupported_dtype_rejected(tmp_path):
    with pytest.raises(ValueError, match="dtype"):
        write_ntc(tmp_path / "x.ntc", {"a": np.ones(2, dtype=np.complex64)})
