"""CFXT tensor files: the engine's binary interchange format.

Implemented independently of the engine so the bridge stays decoupled; the
byte layout is the shared contract: magic "CFXT", version byte (1), dtype
byte (1 = float32), ndims byte, ndims little-endian u32 dims, then the
row-major float32 little-endian payload.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

MAGIC = b"CFXT"
VERSION = 1
DTYPE_F32 = 1


def write_tensor(arr: np.ndarray, path) -> None:
    arr = np.ascontiguousarray(arr, dtype=np.float32)
    if arr.ndim < 1 or arr.ndim > 255 or any(d < 1 for d in arr.shape):
        raise ValueError(f"unsupported shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError("non-finite value in tensor payload")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<BBB", VERSION, DTYPE_F32, arr.ndim))
        fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        fh.write(arr.astype("<f4", copy=False).tobytes())


def read_tensor(path) -> np.ndarray:
    blob = Path(path).read_bytes()
    if blob[:4] != MAGIC:
        raise ValueError(f"bad magic {blob[:4]!r}")
    version, dtype, ndims = blob[4], blob[5], blob[6]
    if version != VERSION or dtype != DTYPE_F32:
        raise ValueError(f"unsupported version/dtype {version}/{dtype}")
    dims = struct.unpack(f"<{ndims}I", blob[7 : 7 + 4 * ndims])
    payload = blob[7 + 4 * ndims :]
    expected = int(np.prod(dims)) * 4
    if len(payload) != expected:
        raise ValueError(f"payload size {len(payload)} != expected {expected}")
    return np.frombuffer(payload, dtype="<f4").reshape(dims).astype(np.float32)
