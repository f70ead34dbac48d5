"""Binary checkpoint format.

Layout (all integers little-endian uint32):

    magic "PFT1"
    repeated until EOF:
        name_len | name bytes (utf-8) | rank | extents[rank] | float32 payload

Payloads are row-major float32; the round trip is bit-exact.
"""

from __future__ import annotations

import struct
from pathlib import Path
from typing import Mapping

import numpy as np

from ..errors import DataError

MAGIC = b"PFT1"


def save_arrays(path, arrays: Mapping[str, np.ndarray]) -> None:
    """Write named float32 arrays in insertion order."""
    path = Path(path)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        for name, arr in arrays.items():
            arr = np.ascontiguousarray(arr, dtype="<f4")
            name_b = name.encode("utf-8")
            fh.write(struct.pack("<I", len(name_b)))
            fh.write(name_b)
            fh.write(struct.pack("<I", arr.ndim))
            if arr.ndim:
                fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(arr.tobytes(order="C"))


def load_arrays(path) -> dict[str, np.ndarray]:
    """Read a checkpoint back into ``{name: float32 array}``."""
    path = Path(path)
    try:
        blob = path.read_bytes()
    except OSError as exc:
        raise DataError(f"checkpoint {path}: {exc}") from exc
    if blob[:4] != MAGIC:
        raise DataError(f"checkpoint {path}: bad magic {blob[:4]!r}")
    out: dict[str, np.ndarray] = {}
    pos = 4
    total = len(blob)

    def take(n: int) -> bytes:
        nonlocal pos
        if pos + n > total:
            raise DataError(f"checkpoint {path}: truncated at byte {pos}")
        chunk = blob[pos:pos + n]
        pos += n
        return chunk

    while pos < total:
        (name_len,) = struct.unpack("<I", take(4))
        name = take(name_len).decode("utf-8")
        (rank,) = struct.unpack("<I", take(4))
        shape = struct.unpack(f"<{rank}I", take(4 * rank)) if rank else ()
        count = int(np.prod(shape, dtype=np.int64)) if rank else 1
        payload = take(4 * count)
        arr = np.frombuffer(payload, dtype="<f4").reshape(shape).copy()
        if name in out:
            raise DataError(f"checkpoint {path}: duplicate record {name!r}")
        out[name] = arr
    return out
