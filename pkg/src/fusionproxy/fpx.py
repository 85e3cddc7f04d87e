"""Bit-exact binary tensor container (FPX1).

Layout: magic ``FPX1`` (4 bytes) | dtype code u8 (0 = float32) | rank u8 |
dims as u32 little-endian x rank | payload row-major little-endian float32.

The same container backs the teacher cache, panel normalization stats and
student checkpoints, so round trips must be bit-exact.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

FPX_MAGIC = b"FPX1"
FPX_VERSION = "FPX1"

_DTYPE_CODES = {0: np.dtype("<f4")}
_MAX_RANK = 255


def encode_tensor(arr: np.ndarray) -> bytes:
    """Serialize an array as float32 FPX1 bytes."""
    arr = np.asarray(arr, dtype="<f4")
    arr = np.ascontiguousarray(arr).reshape(arr.shape)
    if arr.ndim > _MAX_RANK:
        raise ValueError(f"rank {arr.ndim} exceeds FPX1 limit {_MAX_RANK}")
    header = FPX_MAGIC + struct.pack("<BB", 0, arr.ndim)
    dims = struct.pack(f"<{arr.ndim}I", *arr.shape)
    return header + dims + arr.tobytes(order="C")


def decode_tensor(data: bytes) -> np.ndarray:
    """Parse FPX1 bytes back into a float32 array."""
    if len(data) < 6:
        raise ValueError("truncated FPX1 blob: missing header")
    magic = data[:4]
    if magic != FPX_MAGIC:
        raise ValueError(
            f"tensor version mismatch: file says {magic.decode('ascii', 'replace')!r}, "
            f"reader supports {FPX_VERSION!r}"
        )
    dtype_code, rank = struct.unpack("<BB", data[4:6])
    if dtype_code not in _DTYPE_CODES:
        raise ValueError(f"unknown FPX1 dtype code {dtype_code}")
    dtype = _DTYPE_CODES[dtype_code]
    dims_end = 6 + 4 * rank
    if len(data) < dims_end:
        raise ValueError("truncated FPX1 blob: missing dims")
    shape = struct.unpack(f"<{rank}I", data[6:dims_end])
    count = int(np.prod(shape, dtype=np.int64)) if rank else 1
    payload = data[dims_end:]
    if len(payload) != count * dtype.itemsize:
        raise ValueError(
            f"FPX1 payload size {len(payload)} does not match dims {shape}"
        )
    return np.frombuffer(payload, dtype=dtype).reshape(shape).copy()


def write_tensor(path: str | Path, arr: np.ndarray) -> None:
    Path(path).write_bytes(encode_tensor(arr))


def read_tensor(path: str | Path) -> np.ndarray:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"tensor file not found: {path}")
    return decode_tensor(path.read_bytes())


def read_tensor_dims(path: str | Path) -> tuple[int, ...]:
    """Read only the header dims (cheap integrity check for manifests)."""
    path = Path(path)
    with open(path, "rb") as fh:
        head = fh.read(6)
        if head[:4] != FPX_MAGIC:
            raise ValueError(
                f"tensor version mismatch: file says {head[:4].decode('ascii', 'replace')!r}, "
                f"reader supports {FPX_VERSION!r}"
            )
        rank = head[5]
        dims = fh.read(4 * rank)
    return struct.unpack(f"<{rank}I", dims)
