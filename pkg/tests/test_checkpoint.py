import struct

import numpy as np
import pytest

from checkpoint import (MAGIC, decode_checkpoint, encode_checkpoint, load_checkpoint, rng_from_array, rng_to_array,
                        save_checkpoint)
from errors import (CheckpointError, CheckpointMagicError, CheckpointTruncatedError, CheckpointVersionError)


@pytest.fixture
def arrays(rng):
    return {
        "param/w": rng.normal(size=(3, 2)),
        "param/b": rng.normal(size=3).astype(np.float32),
        "adam.t": np.array([7], dtype=np.int64),
        "rng/f1": rng_to_array(np.random.default_rng(5)),
        "scalar": np.array(2.5),
    }


def test_layout_header():
    blob = encode_checkpoint(42, {"a": np.array([1.0])})
    assert blob[:4] == MAGIC
    version, iteration, count = struct.unpack("<IQI", blob[4:20])
    assert (version, iteration, count) == (1, 42, 1)
    name_len = struct.unpack("<I", blob[20:24])[0]
    assert blob[24:24 + name_len] == b"a"
    tag, rank = blob[24 + name_len], blob[25 + name_len]
    assert (tag, rank) == (1, 1)


def test_decode_restores_values_dtypes_and_iteration(arrays):
    iteration, restored = decode_checkpoint(encode_checkpoint(9, arrays))
    assert iteration == 9
    assert set(restored) == set(arrays)
    for name, value in arrays.items():
        assert restored[name].dtype == value.dtype
        assert np.array_equal(restored[name], value)


def test_corrupted_magic(arrays):
    blob = bytearray(encode_checkpoint(1, arrays))
    blob[0:4] = b"XXXX"
    with pytest.raises(CheckpointMagicError):
        decode_checkpoint(bytes(blob))


def test_unknown_version(arrays):
    blob = bytearray(encode_checkpoint(1, arrays))
    blob[4:8] = struct.pack("<I", 99)
    with pytest.raises(CheckpointVersionError, match="99"):
        decode_checkpoint(bytes(blob))


@pytest.mark.parametrize("cut", [3, 10, 30, -1])
def test_truncated_file(arrays, cut):
    blob = encode_checkpoint(1, arrays)
    with pytest.raises(CheckpointTruncatedError):
        decode_checkpoint(blob[:cut])


def test_unsupported_dtype_is_rejected():
    with pytest.raises(CheckpointError, match="unsupported dtype"):
        encode_checkpoint(0, {"flag": np.array([True])})


def test_errors_are_distinct_types():
    kinds = {CheckpointMagicError, CheckpointVersionError, CheckpointTruncatedError}
    assert len(kinds) == 3 and all(issubclass(k, CheckpointError) for k in kinds)


def test_rng_state_round_trip():
    rng = np.random.default_rng(123)
    rng.normal(size=5)
    rng.integers(0, 10, size=3)
    twin = rng_from_array(rng_to_array(rng))
    assert np.array_equal(rng.normal(size=4), twin.normal(size=4))
    assert rng.integers(0, 1 << 30) == twin.integers(0, 1 << 30)


def test_save_and_load_file(tmp_path, arrays):
    path = tmp_path / "nested" / "run.coda"
    save_checkpoint(path, 3, arrays)
    assert not (tmp_path / "nested" / "run.coda.tmp").exists()
    iteration, restored = load_checkpoint(path)
    assert iteration == 3
    assert np.array_equal(restored["param/w"], arrays["param/w"])


def test_missing_checkpoint(tmp_path):
    with pytest.raises(CheckpointError, match="not found"):
        load_checkpoint(tmp_path / "nope.coda")
