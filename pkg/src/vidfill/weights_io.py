"""Checkpoint serialization.

Layout: magic "AVDW", format version (u32 LE), entry count (u32 LE), then a
table of (name, shape, payload offset) entries, then the raw float32 LE
payloads. Entry encoding: name length u16 + UTF-8 bytes, rank u8, dims u32
each, offset u64 (relative to the payload section start).
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

MAGIC = b"AVDW"
VERSION = 1


def save_weights(path, tensors: dict[str, np.ndarray]) -> None:
    """Write named float32 arrays; names are sorted for a stable layout."""
    names = sorted(tensors)
    table = bytearray()
    payload = bytearray()
    for name in names:
        arr = np.ascontiguousarray(tensors[name], dtype=np.float32)
        raw = name.encode("utf-8")
        table += struct.pack("<H", len(raw)) + raw
        table += struct.pack("<B", arr.ndim)
        for dim in arr.shape:
            table += struct.pack("<I", dim)
        table += struct.pack("<Q", len(payload))
        payload += arr.tobytes()
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<II", VERSION, len(names)))
        f.write(table)
        f.write(payload)


def load_weights(path) -> dict[str, np.ndarray]:
    data = Path(path).read_bytes()
    if data[:4] != MAGIC:
        raise ValueError(f"{path}: bad magic {data[:4]!r}, expected {MAGIC!r}")
    version, count = struct.unpack_from("<II", data, 4)
    if version != VERSION:
        raise ValueError(f"{path}: unsupported format version {version}")
    pos = 12
    entries = []
    for _ in range(count):
        (name_len,) = struct.unpack_from("<H", data, pos)
        pos += 2
        name = data[pos:pos + name_len].decode("utf-8")
        pos += name_len
        (rank,) = struct.unpack_from("<B", data, pos)
        pos += 1
        shape = struct.unpack_from(f"<{rank}I", data, pos) if rank else ()
        pos += 4 * rank
        (offset,) = struct.unpack_from("<Q", data, pos)
        pos += 8
        entries.append((name, shape, offset))
    out = {}
    for name, shape, offset in entries:
        n = int(np.prod(shape)) if shape else 1
        start = pos + offset
        arr = np.frombuffer(data, dtype="<f4", count=n, offset=start)
        out[name] = arr.reshape(shape).astype(np.float32)
    return out
