"""Binary weight checkpoints.

Layout (all integers little-endian u32, payload little-endian f64):

    magic "MGWT" | version | repeated records of
    name length | UTF-8 name | rank | extents... | row-major payload
"""

from __future__ import annotations

import struct
from typing import Dict

import numpy as np

from .errors import CheckpointError
from .tensor import Tensor

MAGIC = b"MGWT"
VERSION = 1


def save_weights(path, params: Dict[str, Tensor]) -> None:
    """Write named tensors in a stable (sorted-by-name) record order."""
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", VERSION))
        for name in sorted(params):
            data = params[name].data
            encoded = name.encode("utf-8")
            f.write(struct.pack("<I", len(encoded)))
            f.write(encoded)
            f.write(struct.pack("<I", data.ndim))
            f.write(struct.pack(f"<{data.ndim}I", *data.shape))
            f.write(np.ascontiguousarray(data, dtype="<f8").tobytes())


def load_weights(path) -> Dict[str, np.ndarray]:
    with open(path, "rb") as f:
        blob = f.read()
    if blob[:4] != MAGIC:
        raise CheckpointError(f"{path}: bad magic {blob[:4]!r}")
    (version,) = struct.unpack_from("<I", blob, 4)
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported version {version}")
    out: Dict[str, np.ndarray] = {}
    off = 8
    total = len(blob)
    while off < total:
        try:
            (nlen,) = struct.unpack_from("<I", blob, off)
            off += 4
            name = blob[off:off + nlen].decode("utf-8")
            off += nlen
            (rank,) = struct.unpack_from("<I", blob, off)
            off += 4
            extents = struct.unpack_from(f"<{rank}I", blob, off)
            off += 4 * rank
            count = int(np.prod(extents)) if rank else 1
            arr = np.frombuffer(blob, dtype="<f8", count=count, offset=off)
            off += 8 * count
        except (struct.error, UnicodeDecodeError, ValueError) as e:
            raise CheckpointError(f"{path}: truncated or corrupt record at byte {off}") from e
        if name in out:
            raise CheckpointError(f"{path}: duplicate record {name!r}")
        out[name] = np.ascontiguousarray(arr.reshape(extents))
    return out
