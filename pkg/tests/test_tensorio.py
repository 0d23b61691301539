import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from xattn.tensorio import MAGIC, TensorIOError, load_tensor, save_tensor


def test_round_trip_exact(tmp_path, rng):
    for shape in [(3,), (2, 4), (2, 3, 4), (1, 1, 1, 5)]:
        arr = rng.normal(size=shape).astype(np.float32)
        path = tmp_path / "t.atns"
        save_tensor(path, arr)
        back = load_tensor(path)
        assert back.dtype == np.float32
        assert np.array_equal(back, arr)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(1, 4))
def test_round_trip_property(seed, ndim, tmp_path_factory):
    rng = np.random.default_rng(seed)
    shape = tuple(int(rng.integers(1, 5)) for _ in range(ndim))
    arr = rng.normal(size=shape).astype(np.float32)
    path = tmp_path_factory.mktemp("atns") / "t.atns"
    save_tensor(path, arr)
    assert np.array_equal(load_tensor(path), arr)


def test_truncated_payload(tmp_path):
    path = tmp_path / "t.atns"
    save_tensor(path, np.ones((3, 3), dtype=np.float32))
    blob = path.read_bytes()
    path.write_bytes(blob[:-5])
    with pytest.raises(TensorIOError, match="unexpected EOF"):
        load_tensor(path)


def test_truncated_header(tmp_path):
    path = tmp_path / "t.atns"
    path.write_bytes(MAGIC + b"\x01")
    with pytest.raises(TensorIOError, match="unexpected EOF"):
        load_tensor(path)


def test_bad_magic(tmp_path):
    path = tmp_path / "t.atns"
    save_tensor(path, np.ones(2, dtype=np.float32))
    blob = bytearray(path.read_bytes())
    blob[:4] = b"NOPE"
    path.write_bytes(bytes(blob))
    with pytest.raises(TensorIOError, match="bad magic"):
        load_tensor(path)


def test_bad_version(tmp_path):
    path = tmp_path / "t.atns"
    save_tensor(path, np.ones(2, dtype=np.float32))
    blob = bytearray(path.read_bytes())
    blob[4:8] = struct.pack("<I", 9)
    path.write_bytes(bytes(blob))
    with pytest.raises(TensorIOError, match="unsupported version"):
        load_tensor(path)


def test_trailing_bytes(tmp_path):
    path = tmp_path / "t.atns"
    save_tensor(path, np.ones(2, dtype=np.float32))
    path.write_bytes(path.read_bytes() + b"xx")
    with pytest.raises(TensorIOError, match="trailing bytes"):
        load_tensor(path)


def test_missing_file_names_path(tmp_path):
    with pytest.raises(TensorIOError, match="nope.atns"):
        load_tensor(tmp_path / "nope.atns")
