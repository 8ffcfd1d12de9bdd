import struct

import numpy as np
import pytest

from dnvs.nvst_io import MAGIC, NvstFormatError, read_nvst, write_nvst


def test_roundtrip_f64(tmp_path):
    rng = np.random.default_rng(0)
    for shape in [(), (5,), (3, 4), (2, 3, 4, 5)]:
        arr = rng.standard_normal(shape)
        p = tmp_path / "t.nvst"
        write_nvst(p, arr)
        back = read_nvst(p)
        assert back.dtype == np.float64
        assert back.shape == arr.shape
        assert np.array_equal(back, arr)


def test_roundtrip_f32(tmp_path):
    arr = np.arange(12, dtype=np.float32).reshape(3, 4)
    p = tmp_path / "t.nvst"
    write_nvst(p, arr)
    back = read_nvst(p)
    assert back.dtype == np.float32
    assert np.array_equal(back, arr)


def test_header_layout(tmp_path):
    arr = np.arange(6, dtype=np.float64).reshape(2, 3)
    p = tmp_path / "t.nvst"
    write_nvst(p, arr)
    raw = p.read_bytes()
    assert raw[:4] == MAGIC
    assert raw[4] == 1  # version
    assert raw[5] == 1  # f64 code
    assert raw[6] == 2  # ndim
    assert struct.unpack("<2Q", raw[7:23]) == (2, 3)
    assert len(raw) == 23 + 6 * 8
    assert np.frombuffer(raw, "<f8", offset=23).tolist() == arr.reshape(-1).tolist()


def test_int_input_upcast(tmp_path):
    p = tmp_path / "t.nvst"
    write_nvst(p, np.arange(4))
    assert read_nvst(p).dtype == np.float64


def test_rejects_bad_magic(tmp_path):
    p = tmp_path / "bad.nvst"
    p.write_bytes(b"XXXX" + bytes(20))
    with pytest.raises(NvstFormatError, match="magic"):
        read_nvst(p)


def test_rejects_bad_version(tmp_path):
    arr = np.zeros(2)
    p = tmp_path / "t.nvst"
    write_nvst(p, arr)
    raw = bytearray(p.read_bytes())
    raw[4] = 9
    p.write_bytes(bytes(raw))
    with pytest.raises(NvstFormatError, match="version"):
        read_nvst(p)


def test_rejects_truncated_payload(tmp_path):
    arr = np.zeros(8)
    p = tmp_path / "t.nvst"
    write_nvst(p, arr)
    p.write_bytes(p.read_bytes()[:-4])
    with pytest.raises(NvstFormatError, match="payload"):
        read_nvst(p)


def test_rejects_tiny_file(tmp_path):
    p = tmp_path / "t.nvst"
    p.write_bytes(b"NV")
    with pytest.raises(NvstFormatError):
        read_nvst(p)
