#!/usr/bin/env python3
"""
IDX Reader - Decode/encode the IDX binary format (unsigned-byte payloads) and load
source/target domain pairs from IDX image + label files.
"""
import logging
import struct
from pathlib import Path
from typing import Optional, Tuple

import numpy as np

from config import IdxPaths
from datagen import DomainDataset
from errors import DataError, IdxDtypeError, IdxLengthError, IdxMagicError

logger = logging.getLogger(__name__)

UBYTE = 0x08


def parse_idx_raw(blob: bytes) -> np.ndarray:
    """Header and payload checks, returning the raw uint8 array shaped per the header."""
    if len(blob) < 4 or blob[0] != 0 or blob[1] != 0:
        raise IdxMagicError(f"IDX magic must start with two zero bytes, got {blob[:2].hex() or 'empty'}")
    dtype_code, ndim = blob[2], blob[3]
    if dtype_code != UBYTE:
        raise IdxDtypeError(f"unsupported IDX dtype 0x{dtype_code:02x} (only 0x08 unsigned byte)")
    header_len = 4 + 4 * ndim
    if len(blob) < header_len:
        raise IdxLengthError(header_len, len(blob))
    dims = struct.unpack(f">{ndim}I", blob[4:header_len])
    expected = int(np.prod(dims, dtype=np.int64))
    payload = blob[header_len:]
    if len(payload) != expected:
        raise IdxLengthError(expected, len(payload))
    return np.frombuffer(payload, dtype=np.uint8).reshape(dims)


def parse_idx(blob: bytes, labels: bool = False) -> np.ndarray:
    """Decode an IDX blob; images are scaled to [0, 1], labels are returned as int64 class indices."""
    raw = parse_idx_raw(blob)
    if labels:
        return raw.astype(np.int64)
    return raw.astype(np.float64) / 255.0


def write_idx(values: np.ndarray) -> bytes:
    values = np.asarray(values)
    if values.size and (values.min() < 0 or values.max() > 255):
        raise DataError("write_idx: values must lie in [0, 255]")
    if values.ndim > 255:
        raise DataError(f"write_idx: rank {values.ndim} too large")
    header = bytes([0, 0, UBYTE, values.ndim]) + struct.pack(f">{values.ndim}I", *values.shape)
    return header + values.astype(np.uint8).tobytes()


def images_to_bytes(images: np.ndarray) -> np.ndarray:
    """[0, 1] floats to the 0..255 grid used by IDX."""
    return np.clip(np.rint(np.asarray(images) * 255.0), 0, 255).astype(np.uint8)


def read_idx_file(path: str, labels: bool = False) -> np.ndarray:
    try:
        blob = Path(path).read_bytes()
    except OSError as e:
        raise DataError(f"cannot read IDX file {path}: {e}") from e
    try:
        return parse_idx(blob, labels=labels)
    except DataError:
        logger.error(f"Malformed IDX file {path}")
        raise


def _as_nchw(images: np.ndarray) -> np.ndarray:
    if images.ndim == 3:  # N x H x W grayscale
        return images[:, None, :, :]
    if images.ndim == 4 and images.shape[-1] in (1, 3) and images.shape[1] not in (1, 3):
        return images.transpose(0, 3, 1, 2)
    return images


def _dataset(images: np.ndarray, labels: Optional[np.ndarray], domain: str, n_classes: int) -> DomainDataset:
    if labels is not None and len(labels) != len(images):
        raise DataError(f"{domain}: {len(images)} images but {len(labels)} labels")
    return DomainDataset(_as_nchw(images), labels, domain, n_classes, "idx")


def load_idx_dataset(paths: IdxPaths) -> Tuple[DomainDataset, DomainDataset]:
    """Source/target pair from IDX files; images must agree on per-sample shape after NCHW conversion."""
    x_s = read_idx_file(paths.source_images)
    y_s = read_idx_file(paths.source_labels, labels=True)
    x_t = read_idx_file(paths.target_images)
    y_t = read_idx_file(paths.target_labels, labels=True) if paths.target_labels else None
    n_classes = int(max(y_s.max(), y_t.max() if y_t is not None else 0)) + 1
    source = _dataset(x_s, y_s, "source", n_classes)
    target = _dataset(x_t, y_t, "target", n_classes)
    if source.sample_shape != target.sample_shape:
        raise DataError(f"source samples {source.sample_shape} and target samples {target.sample_shape} differ")
    logger.info(f"Loaded IDX pair: {len(source)} source / {len(target)} target samples, "
                f"shape {source.sample_shape}, K={n_classes}")
    return source, target


def export_idx(dataset: DomainDataset, images_path: Path, labels_path: Path) -> None:
    """Write an image dataset as two IDX files (N x H x W x C unsigned bytes + labels)."""
    if dataset.inputs.ndim != 4:
        raise DataError(f"export_idx: expected NCHW images, got shape {dataset.inputs.shape}")
    try:
        Path(images_path).write_bytes(write_idx(images_to_bytes(dataset.inputs.transpose(0, 2, 3, 1))))
        if dataset.labels is not None:
            Path(labels_path).write_bytes(write_idx(dataset.labels))
    except OSError as e:
        raise OSError(f"cannot write IDX export next to {images_path}: {e}") from e
    logger.info(f"Wrote IDX export {images_path}")
