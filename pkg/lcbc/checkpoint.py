"""LCBC binary container for named tensors.

Layout (all integers u32 little-endian)::

    b"LCBC" | version | count | entries...
    entry (v1): name_len | name (UTF-8) | rank | extents... | float32 LE payload
    entry (v2): name_len | name (UTF-8) | dtype (u8: 0=f32, 1=u8) | rank | extents... | payload

Weights are always written as version 1. Version 2 only appears when a blob
holds raw uint8 frames (dataset storage).
"""

from __future__ import annotations

import logging
import struct
from collections.abc import Mapping
from pathlib import Path

import numpy as np

logger = logging.getLogger("lcbc.checkpoint")

MAGIC = b"LCBC"
FORMAT_VERSION = 1
MIXED_DTYPE_VERSION = 2
SUPPORTED_VERSIONS = (FORMAT_VERSION, MIXED_DTYPE_VERSION)

_DTYPE_CODES: dict[int, np.dtype] = {0: np.dtype("<f4"), 1: np.dtype("u1")}
_CODE_FOR_DTYPE = {dtype: code for code, dtype in _DTYPE_CODES.items()}


class CheckpointError(ValueError):
    pass


class TruncatedCheckpointError(CheckpointError):
    pass


def _normalised(array: np.ndarray) -> np.ndarray:
    array = np.asarray(array)
    if array.dtype == np.uint8:
        return array
    return array.astype("<f4")


def encode_tensors(tensors: Mapping[str, np.ndarray]) -> bytes:
    arrays = {name: _normalised(value) for name, value in tensors.items()}
    mixed = any(array.dtype == np.uint8 for array in arrays.values())
    version = MIXED_DTYPE_VERSION if mixed else FORMAT_VERSION

    chunks = [MAGIC, struct.pack("<II", version, len(arrays))]
    for name, array in arrays.items():
        encoded_name = name.encode("utf-8")
        chunks.append(struct.pack("<I", len(encoded_name)))
        chunks.append(encoded_name)
        if version == MIXED_DTYPE_VERSION:
            chunks.append(struct.pack("<B", _CODE_FOR_DTYPE[array.dtype]))
        chunks.append(struct.pack("<I", array.ndim))
        chunks.append(struct.pack(f"<{array.ndim}I", *array.shape))
        chunks.append(np.ascontiguousarray(array).tobytes(order="C"))
    return b"".join(chunks)


class _Reader:
    def __init__(self, payload: bytes, source: str) -> None:
        self.payload = payload
        self.offset = 0
        self.source = source

    def take(self, size: int, what: str) -> bytes:
        end = self.offset + size
        if end > len(self.payload):
            raise TruncatedCheckpointError(f"{self.source}: truncated while reading {what}")
        chunk = self.payload[self.offset : end]
        self.offset = end
        return chunk

    def u32(self, what: str) -> int:
        return struct.unpack("<I", self.take(4, what))[0]


def decode_tensors(
    payload: bytes,
    *,
    source: str = "<bytes>",
    allow_truncated: bool = False,
) -> dict[str, np.ndarray]:
    """Parse an LCBC blob. With ``allow_truncated`` the complete leading entries
    are returned and the cut-off tail is dropped with a warning."""
    reader = _Reader(payload, source)
    magic = reader.take(4, "magic bytes")
    if magic != MAGIC:
        raise CheckpointError(f"{source}: bad magic {magic!r}, expected {MAGIC!r}")
    version = reader.u32("format version")
    if version not in SUPPORTED_VERSIONS:
        raise CheckpointError(f"{source}: unsupported format version {version}, expected one of {SUPPORTED_VERSIONS}")
    count = reader.u32("tensor count")

    tensors: dict[str, np.ndarray] = {}
    for index in range(count):
        start = reader.offset
        try:
            name, array = _read_entry(reader, version, index)
        except TruncatedCheckpointError:
            if not allow_truncated:
                raise
            logger.warning("checkpoint_truncated source=%s complete=%s declared=%s", source, index, count)
            reader.offset = start
            break
        tensors[name] = array
    if reader.offset != len(payload) and len(tensors) == count:
        logger.warning("checkpoint_trailing_bytes source=%s extra=%s", source, len(payload) - reader.offset)
    return tensors


def _read_entry(reader: _Reader, version: int, index: int) -> tuple[str, np.ndarray]:
    source = reader.source
    name_len = reader.u32(f"name length of tensor #{index}")
    name = reader.take(name_len, f"name of tensor #{index}").decode("utf-8")
    dtype = _DTYPE_CODES[0]
    if version == MIXED_DTYPE_VERSION:
        code = reader.take(1, f"dtype of tensor `{name}`")[0]
        if code not in _DTYPE_CODES:
            raise CheckpointError(f"{source}: tensor `{name}` has unknown dtype code {code}")
        dtype = _DTYPE_CODES[code]
    rank = reader.u32(f"rank of tensor `{name}`")
    extents = struct.unpack(f"<{rank}I", reader.take(4 * rank, f"extents of tensor `{name}`"))
    count_values = int(np.prod(extents, dtype=np.int64)) if rank else 1
    raw = reader.take(count_values * dtype.itemsize, f"payload of tensor `{name}`")
    array = np.frombuffer(raw, dtype=dtype).reshape(extents)
    if dtype.kind == "f":
        array = array.astype(np.float32)
        if not np.isfinite(array).all():
            raise CheckpointError(f"{source}: tensor `{name}` contains non-finite values")
    else:
        array = array.copy()
    return name, array


def save_tensors(path: Path, tensors: Mapping[str, np.ndarray]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(encode_tensors(tensors))
    logger.debug("checkpoint_saved path=%s tensors=%s", path, len(tensors))
    return path


def load_tensors(path: Path, *, allow_truncated: bool = False) -> dict[str, np.ndarray]:
    path = Path(path)
    if not path.is_file():
        raise CheckpointError(f"checkpoint not found: {path}")
    return decode_tensors(path.read_bytes(), source=str(path), allow_truncated=allow_truncated)


def require_tensors(
    tensors: Mapping[str, np.ndarray],
    expected: Mapping[str, tuple[int, ...]],
    *,
    source: str,
) -> None:
    """Check names and shapes; the first missing or mis-shaped tensor is named in the error."""
    for name, shape in expected.items():
        if name not in tensors:
            raise CheckpointError(f"{source}: missing tensor `{name}`")
        if tuple(tensors[name].shape) != tuple(shape):
            raise CheckpointError(
                f"{source}: tensor `{name}` has shape {tuple(tensors[name].shape)}, expected {tuple(shape)}"
            )
