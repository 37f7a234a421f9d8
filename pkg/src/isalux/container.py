"""ISAT1 binary tensor container.

Layout, all little-endian:
    magic   4 bytes  b"ISAT"
    version u8       1
    count   u32      number of records
    per record:
        name_len u16, then UTF-8 name bytes
        rank     u8
        extents  u32 * rank
        payload  f32 * prod(extents)

Used for checkpoints, semantic prior maps, and perceptual-extractor weights.
Record order is preserved, so identical content serializes byte-identically.
"""
from __future__ import annotations

import struct
from typing import Iterable, Mapping

import numpy as np

MAGIC = b"ISAT"
VERSION = 1


class ContainerError(ValueError):
    """Malformed or truncated ISAT1 data."""


def write_records(path: str, records: Mapping[str, np.ndarray] | Iterable[tuple[str, np.ndarray]]) -> None:
    """Write named float32 arrays to `path` in ISAT1 format, in given order."""
    items = list(records.items()) if isinstance(records, Mapping) else list(records)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<BI", VERSION, len(items)))
        for name, arr in items:
            arr = np.ascontiguousarray(arr, dtype="<f4")
            nb = name.encode("utf-8")
            if len(nb) > 0xFFFF:
                raise ContainerError(f"record name too long: {len(nb)} bytes")
            if arr.ndim < 1 or arr.ndim > 4:
                raise ContainerError(f"record {name!r} must have rank 1..4, got {arr.ndim}")
            fh.write(struct.pack("<H", len(nb)))
            fh.write(nb)
            fh.write(struct.pack("<B", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(arr.tobytes())


def read_records(path: str) -> dict[str, np.ndarray]:
    """Read all records from an ISAT1 file, preserving order."""
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:4] != MAGIC:
        raise ContainerError(f"{path}: bad magic {data[:4]!r}, expected {MAGIC!r}")
    if len(data) < 9:
        raise ContainerError(f"{path}: truncated header")
    version, count = struct.unpack_from("<BI", data, 4)
    if version != VERSION:
        raise ContainerError(f"{path}: unsupported version {version}")
    pos = 9
    out: dict[str, np.ndarray] = {}
    for _ in range(count):
        try:
            (name_len,) = struct.unpack_from("<H", data, pos)
            pos += 2
            name = data[pos : pos + name_len].decode("utf-8")
            pos += name_len
            (rank,) = struct.unpack_from("<B", data, pos)
            pos += 1
            if rank < 1 or rank > 4:
                raise ContainerError(f"{path}: record {name!r} has invalid rank {rank}")
            extents = struct.unpack_from(f"<{rank}I", data, pos)
            pos += 4 * rank
            n = int(np.prod(extents))
            payload = data[pos : pos + 4 * n]
            if len(payload) != 4 * n:
                raise ContainerError(f"{path}: record {name!r} payload truncated")
            pos += 4 * n
        except struct.error as exc:
            raise ContainerError(f"{path}: corrupt record table ({exc})") from exc
        out[name] = np.frombuffer(payload, dtype="<f4").reshape(extents).copy()
    if pos != len(data):
        raise ContainerError(f"{path}: {len(data) - pos} trailing bytes after last record")
    return out


def encode_text(text: str) -> np.ndarray:
    """UTF-8 bytes embedded as a rank-1 float record (one byte per float)."""
    return np.frombuffer(text.encode("utf-8"), dtype=np.uint8).astype("<f4")


def decode_text(arr: np.ndarray) -> str:
    vals = np.asarray(arr).reshape(-1)
    return bytes(int(round(v)) for v in vals).decode("utf-8")
