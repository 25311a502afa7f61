#!/usr/bin/env python3
"""
Checkpoint - Binary snapshot of a training run.

Layout (all integers little-endian):
    b"CODA" | u32 version | u64 iteration | u32 count
    count x ( u32 name length | name (utf-8) | u8 dtype tag | u8 rank | rank x u64 dim | raw values )
"""
import logging
import os
import struct
from pathlib import Path
from typing import Dict, Tuple

import numpy as np

from errors import CheckpointError, CheckpointMagicError, CheckpointTruncatedError, CheckpointVersionError

logger = logging.getLogger(__name__)

MAGIC = b"CODA"
FORMAT_VERSION = 1

DTYPE_TAGS = {1: "<f8", 2: "<f4", 3: "<i8", 4: "<u8"}
TAG_OF = {dt: tag for tag, dt in DTYPE_TAGS.items()}

_MASK64 = (1 << 64) - 1


def rng_to_array(rng: np.random.Generator) -> np.ndarray:
    """Encode a PCG64 generator state as uint64[6]."""
    state = rng.bit_generator.state
    if state["bit_generator"] != "PCG64":
        raise CheckpointError(f"cannot serialize {state['bit_generator']} generator state")
    s, inc = state["state"]["state"], state["state"]["inc"]
    return np.array([s & _MASK64, s >> 64, inc & _MASK64, inc >> 64, state["has_uint32"], state["uinteger"]],
                    dtype=np.uint64)


def rng_from_array(values: np.ndarray) -> np.random.Generator:
    v = [int(x) for x in np.asarray(values, dtype=np.uint64)]
    bit_gen = np.random.PCG64()
    bit_gen.state = {"bit_generator": "PCG64",
                     "state": {"state": v[0] | (v[1] << 64), "inc": v[2] | (v[3] << 64)},
                     "has_uint32": v[4], "uinteger": v[5]}
    return np.random.Generator(bit_gen)


def encode_checkpoint(iteration: int, arrays: Dict[str, np.ndarray]) -> bytes:
    parts = [MAGIC, struct.pack("<IQI", FORMAT_VERSION, iteration, len(arrays))]
    for name in sorted(arrays):
        value = np.asarray(arrays[name])
        dtype = value.dtype.newbyteorder("<").str
        if dtype not in TAG_OF:
            raise CheckpointError(f"{name}: unsupported dtype {value.dtype}")
        raw_name = name.encode("utf-8")
        parts.append(struct.pack("<I", len(raw_name)) + raw_name)
        parts.append(struct.pack("<BB", TAG_OF[dtype], value.ndim))
        parts.append(struct.pack(f"<{value.ndim}Q", *value.shape))
        parts.append(np.ascontiguousarray(value, dtype=dtype).tobytes())
    return b"".join(parts)


class _Reader:
    def __init__(self, blob: bytes):
        self.blob = blob
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.blob):
            raise CheckpointTruncatedError(
                f"truncated checkpoint: need {n} bytes for {what} at offset {self.pos}, "
                f"{len(self.blob) - self.pos} left")
        chunk = self.blob[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str, what: str) -> Tuple:
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def decode_checkpoint(blob: bytes) -> Tuple[int, Dict[str, np.ndarray]]:
    reader = _Reader(blob)
    magic = reader.take(4, "magic")
    if magic != MAGIC:
        raise CheckpointMagicError(f"bad checkpoint magic {magic!r}, expected {MAGIC!r}")
    version, iteration, count = reader.unpack("<IQI", "header")
    if version != FORMAT_VERSION:
        raise CheckpointVersionError(f"checkpoint format version {version}, this build reads {FORMAT_VERSION}")
    arrays: Dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = reader.unpack("<I", "name length")
        name = reader.take(name_len, "name").decode("utf-8")
        tag, rank = reader.unpack("<BB", f"{name} header")
        if tag not in DTYPE_TAGS:
            raise CheckpointError(f"{name}: unknown dtype tag {tag}")
        shape = reader.unpack(f"<{rank}Q", f"{name} dims")
        dtype = np.dtype(DTYPE_TAGS[tag])
        n_bytes = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
        arrays[name] = np.frombuffer(reader.take(n_bytes, f"{name} values"), dtype=dtype).reshape(shape).copy()
    return iteration, arrays


def save_checkpoint(path: Path, iteration: int, arrays: Dict[str, np.ndarray]) -> None:
    path = Path(path)
    blob = encode_checkpoint(iteration, arrays)
    tmp = path.with_name(path.name + ".tmp")
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        tmp.write_bytes(blob)
        os.replace(tmp, path)
    except OSError as e:
        raise CheckpointError(f"cannot write checkpoint {path}: {e}") from e
    logger.debug(f"Saved {len(arrays)} tensors ({len(blob)} bytes) to {path}")


def load_checkpoint(path: Path) -> Tuple[int, Dict[str, np.ndarray]]:
    try:
        blob = Path(path).read_bytes()
    except FileNotFoundError:
        raise CheckpointError(f"checkpoint not found: {path}") from None
    except OSError as e:
        raise CheckpointError(f"cannot read checkpoint {path}: {e}") from e
    return decode_checkpoint(blob)
