"""Binary tensor container used by datasets, weights, and saliency exports.

Layout: magic ``ATNS``, u32 little-endian version (=1), u32 ndim, then
ndim u32 dims, then the row-major float32 payload. The file length must
equal exactly what the header implies.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

MAGIC = b"ATNS"
VERSION = 1


class TensorIOError(ValueError):
    """Structured parse/write failure; always names the offending file."""

    def __init__(self, path: str | Path, reason: str):
        self.path = str(path)
        self.reason = reason
        super().__init__(f"{path}: {reason}")


def save_tensor(path: str | Path, array: np.ndarray) -> None:
    arr = np.ascontiguousarray(array, dtype=np.float32)
    header = MAGIC + struct.pack("<II", VERSION, arr.ndim)
    header += struct.pack(f"<{arr.ndim}I", *arr.shape)
    with open(path, "wb") as f:
        f.write(header)
        f.write(arr.tobytes(order="C"))


def load_tensor(path: str | Path) -> np.ndarray:
    try:
        with open(path, "rb") as f:
            blob = f.read()
    except FileNotFoundError:
        raise TensorIOError(path, "file not found") from None
    if len(blob) < 12:
        raise TensorIOError(path, "unexpected EOF in header")
    if blob[:4] != MAGIC:
        raise TensorIOError(path, f"bad magic {blob[:4]!r}")
    version, ndim = struct.unpack_from("<II", blob, 4)
    if version != VERSION:
        raise TensorIOError(path, f"unsupported version {version}")
    if len(blob) < 12 + 4 * ndim:
        raise TensorIOError(path, "unexpected EOF in dims")
    dims = struct.unpack_from(f"<{ndim}I", blob, 12)
    expected = 12 + 4 * ndim + 4 * int(np.prod(dims, dtype=np.uint64))
    if len(blob) != expected:
        kind = "unexpected EOF" if len(blob) < expected else "trailing bytes"
        raise TensorIOError(path, f"{kind}: length {len(blob)}, header implies {expected}")
    payload = np.frombuffer(blob, dtype="<f4", offset=12 + 4 * ndim)
    return payload.reshape(dims).copy()
