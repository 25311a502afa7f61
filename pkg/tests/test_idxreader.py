import struct

import numpy as np
import pytest

from config import IdxPaths
from datagen import DomainDataset
from errors import DataError, IdxDtypeError, IdxLengthError, IdxMagicError
from idxreader import export_idx, load_idx_dataset, parse_idx, parse_idx_raw, read_idx_file, write_idx


def _header(dims, dtype=0x08):
    return bytes([0, 0, dtype, len(dims)]) + struct.pack(f">{len(dims)}I", *dims)


def test_three_dimensional_header_expects_exact_payload():
    blob = _header([2, 3, 4]) + bytes(range(24))
    raw = parse_idx_raw(blob)
    assert raw.shape == (2, 3, 4)
    assert raw[1, 2, 3] == 23
    with pytest.raises(IdxLengthError):
        parse_idx_raw(blob + b"\x00")


def test_label_file_decodes_directly():
    labels = parse_idx(_header([5]) + bytes([1, 2, 3, 4, 5]), labels=True)
    np.testing.assert_array_equal(labels, [1, 2, 3, 4, 5])
    assert labels.dtype == np.int64


def test_images_are_scaled_to_unit_interval():
    images = parse_idx(_header([1, 2, 2]) + bytes([0, 51, 255, 102]))
    np.testing.assert_allclose(images[0], [[0.0, 0.2], [1.0, 0.4]])


def test_truncated_payload_reports_expected_and_actual():
    with pytest.raises(IdxLengthError) as info:
        parse_idx_raw(_header([2, 3, 4]) + bytes(20))
    assert info.value.expected == 24 and info.value.actual == 20
    assert "24" in str(info.value) and "20" in str(info.value)


def test_truncated_header():
    with pytest.raises(IdxLengthError):
        parse_idx_raw(bytes([0, 0, 8, 3]) + struct.pack(">I", 2))


@pytest.mark.parametrize("blob", [b"", b"\x01\x00\x08\x01", b"\x00\x07\x08\x01"])
def test_bad_magic(blob):
    with pytest.raises(IdxMagicError):
        parse_idx_raw(blob)


def test_unsupported_dtype():
    with pytest.raises(IdxDtypeError, match="0x0d"):
        parse_idx_raw(_header([1], dtype=0x0D) + bytes(4))


def test_writer_output_parses_back(rng):
    values = rng.integers(0, 256, size=(3, 4, 2), dtype=np.uint8)
    blob = write_idx(values)
    assert blob[:4] == bytes([0, 0, 8, 3])
    np.testing.assert_array_equal(parse_idx_raw(blob), values)
    with pytest.raises(DataError):
        write_idx(np.array([300]))


def test_read_idx_file_errors(tmp_path):
    with pytest.raises(DataError, match="cannot read"):
        read_idx_file(str(tmp_path / "missing.idx"))
    bad = tmp_path / "bad.idx"
    bad.write_bytes(b"\xff\xff\x08\x01")
    with pytest.raises(IdxMagicError):
        read_idx_file(str(bad))


def _write_pair(tmp_path, rng, target_labels=True):
    x_s = rng.integers(0, 256, size=(6, 5, 5), dtype=np.uint8)
    x_t = rng.integers(0, 256, size=(4, 5, 5), dtype=np.uint8)
    files = {"source_images": x_s, "source_labels": np.array([0, 1, 2, 0, 1, 2], dtype=np.uint8),
             "target_images": x_t}
    if target_labels:
        files["target_labels"] = np.array([2, 1, 0, 0], dtype=np.uint8)
    paths = {}
    for name, values in files.items():
        path = tmp_path / f"{name}.idx"
        path.write_bytes(write_idx(values))
        paths[name] = str(path)
    return IdxPaths(**paths), x_s


def test_load_idx_dataset(tmp_path, rng):
    paths, x_s = _write_pair(tmp_path, rng)
    source, target = load_idx_dataset(paths)
    assert source.inputs.shape == (6, 1, 5, 5)
    assert source.n_classes == 3
    np.testing.assert_allclose(source.inputs[:, 0], x_s / 255.0)
    np.testing.assert_array_equal(target.labels, [2, 1, 0, 0])


def test_load_idx_dataset_without_target_labels(tmp_path, rng):
    paths, _ = _write_pair(tmp_path, rng, target_labels=False)
    _, target = load_idx_dataset(paths)
    assert target.labels is None


def test_load_idx_dataset_rejects_mismatched_shapes(tmp_path, rng):
    paths, _ = _write_pair(tmp_path, rng)
    (tmp_path / "target_images.idx").write_bytes(write_idx(rng.integers(0, 256, size=(4, 6, 6), dtype=np.uint8)))
    with pytest.raises(DataError, match="differ"):
        load_idx_dataset(paths)


def test_export_idx_writes_nhwc_bytes(tmp_path, rng):
    images = rng.integers(0, 256, size=(3, 3, 4, 4)) / 255.0
    dataset = DomainDataset(images, np.array([0, 1, 1]), "source", 2)
    export_idx(dataset, tmp_path / "x.idx", tmp_path / "y.idx")
    raw = parse_idx_raw((tmp_path / "x.idx").read_bytes())
    assert raw.shape == (3, 4, 4, 3)
    np.testing.assert_allclose(raw.transpose(0, 3, 1, 2) / 255.0, images)
    np.testing.assert_array_equal(parse_idx((tmp_path / "y.idx").read_bytes(), labels=True), [0, 1, 1])
