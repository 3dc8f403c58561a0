"""Binary checkpoint format.

Layout, all integers little-endian:

    magic   4 bytes   b"TFCK"
    u32     format version (currently 1)
    u64     training iteration
    u32     record count
    records u32 name length, UTF-8 name, u32 ndim, u32 dims..., float32 payload
    u32     JSON length, UTF-8 JSON config echo

Model parameters are stored under their registry names; optimizer moments
under ``opt.m.<name>`` / ``opt.v.<name>``. Payloads are float32 regardless of
training precision, so save/load round-trips are bit-exact for float32 runs.
"""

from __future__ import annotations

import json
import struct

import numpy as np

MAGIC = b"TFCK"
VERSION = 1


def save(path, records, config, iteration):
    """Write named float arrays plus a JSON-serializable config echo."""
    blob = bytearray()
    blob += MAGIC
    blob += struct.pack("<I", VERSION)
    blob += struct.pack("<Q", int(iteration))
    blob += struct.pack("<I", len(records))
    for name, arr in records.items():
        arr = np.ascontiguousarray(arr, dtype="<f4")
        encoded = name.encode("utf-8")
        blob += struct.pack("<I", len(encoded))
        blob += encoded
        blob += struct.pack("<I", arr.ndim)
        blob += struct.pack(f"<{arr.ndim}I", *arr.shape) if arr.ndim else b""
        blob += arr.tobytes()
    payload = json.dumps(config).encode("utf-8")
    blob += struct.pack("<I", len(payload))
    blob += payload
    with open(path, "wb") as fh:
        fh.write(bytes(blob))


def load(path):
    """Read a checkpoint back; returns (records, config, iteration)."""
    with open(path, "rb") as fh:
        data = fh.read()
    view = _Reader(data, path)
    magic = view.take(4)
    if magic != MAGIC:
        raise ValueError(f"{path}: bad magic {magic!r}, expected {MAGIC!r}")
    version = view.u32()
    if version != VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    iteration = view.u64()
    count = view.u32()
    records = {}
    for _ in range(count):
        name = view.take(view.u32()).decode("utf-8")
        ndim = view.u32()
        shape = tuple(view.u32() for _ in range(ndim))
        size = int(np.prod(shape)) if shape else 1
        raw = view.take(4 * size)
        records[name] = np.frombuffer(raw, dtype="<f4").reshape(shape).copy()
    config = json.loads(view.take(view.u32()).decode("utf-8"))
    if view.remaining():
        raise ValueError(f"{path}: {view.remaining()} trailing bytes after config echo")
    return records, config, iteration


class _Reader:
    def __init__(self, data, path):
        self.data = data
        self.path = path
        self.pos = 0

    def take(self, n):
        if self.pos + n > len(self.data):
            raise ValueError(f"{self.path}: truncated at byte {self.pos}, needed {n} more")
        out = self.data[self.pos : self.pos + n]
        self.pos += n
        return out

    def u32(self):
        return struct.unpack("<I", self.take(4))[0]

    def u64(self):
        return struct.unpack("<Q", self.take(8))[0]

    def remaining(self):
        return len(self.data) - self.pos
