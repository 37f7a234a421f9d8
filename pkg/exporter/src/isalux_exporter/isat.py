"""Minimal ISAT1 writer.

Deliberately independent of the consumer package: this tool talks to it
through the byte format alone. Layout (little-endian): magic b"ISAT",
version u8=1, record count u32, then per record a u16-length UTF-8 name,
rank u8, u32 extents, and an f32 payload.
"""
from __future__ import annotations

import struct

import numpy as np

MAGIC = b"ISAT"
VERSION = 1


def write(path: str, records: dict[str, np.ndarray]) -> None:
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<BI", VERSION, len(records)))
        for name, arr in records.items():
            arr = np.ascontiguousarray(arr, dtype="<f4")
            if not 1 <= arr.ndim <= 4:
                raise ValueError(f"record {name!r} must have rank 1..4, got {arr.ndim}")
            nb = name.encode("utf-8")
            fh.write(struct.pack("<H", len(nb)))
            fh.write(nb)
            fh.write(struct.pack("<B", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(arr.tobytes())
