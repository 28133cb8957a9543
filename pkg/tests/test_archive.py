"""Tensor-archive format: round trips, canonical bytes, malformed inputs."""

import numpy as np
import pytest

from lightnorm.archive import load_archive, save_archive
from lightnorm.errors import InputError


def test_round_trip_exact(tmp_path):
    arrays = {
        "w": np.random.default_rng(0).standard_normal((3, 4)).astype(np.float32),
        "b": np.arange(5, dtype=np.int64),
        "flag": np.array(7, dtype=np.int64),
    }
    path = tmp_path / "a.bin"
    save_archive(path, arrays, metadata={"kind": "test"})
    loaded, meta = load_archive(path)
    assert meta == {"kind": "test"}
    assert set(loaded) == set(arrays)
    for name in arrays:
        assert loaded[name].dtype == arrays[name].dtype
        assert np.array_equal(loaded[name], arrays[name])


def test_write_is_canonical(tmp_path):
    a = {"x": np.ones(3, dtype=np.float32), "y": np.zeros(2, dtype=np.float32)}
    p1, p2 = tmp_path / "one.bin", tmp_path / "two.bin"
    save_archive(p1, a)
    save_archive(p2, dict(reversed(list(a.items()))))
    assert p1.read_bytes() == p2.read_bytes()


def test_empty_file_is_parse_error(tmp_path):
    path = tmp_path / "empty.bin"
    path.write_bytes(b"")
    with pytest.raises(InputError):
        load_archive(path)


def test_garbage_header_is_parse_error(tmp_path):
    path = tmp_path / "bad.bin"
    path.write_bytes((1000).to_bytes(8, "little") + b"not json at all")
    with pytest.raises(InputError):
        load_archive(path)


def test_truncated_data_is_error(tmp_path):
    path = tmp_path / "trunc.bin"
    save_archive(path, {"x": np.ones(100, dtype=np.float32)})
    blob = path.read_bytes()
    path.write_bytes(blob[:-50])
    with pytest.raises(InputError):
        load_archive(path)


def test_missing_file_is_input_error(tmp_path):
    with pytest.raises(InputError):
        load_archive(tmp_path / "nope.bin")
