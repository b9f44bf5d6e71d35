"""Flat binary checkpoint format for named parameter sets.

Layout (all integers little-endian u32):
    magic "DANT" | version | entry count
    per entry: name length | UTF-8 name | rank | dims... | raw float32 values

Values are stored as little-endian float32 regardless of engine mode.
"""

from __future__ import annotations

import struct

import numpy as np

MAGIC = b"DANT"
VERSION = 1


class CheckpointError(ValueError):
    """Malformed checkpoint file."""


def save_tensors(path, named: dict[str, np.ndarray]) -> None:
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", VERSION, len(named)))
        for name, arr in named.items():
            data = np.ascontiguousarray(arr, dtype="<f4")
            raw_name = name.encode("utf-8")
            fh.write(struct.pack("<I", len(raw_name)))
            fh.write(raw_name)
            fh.write(struct.pack("<I", data.ndim))
            fh.write(struct.pack(f"<{data.ndim}I", *data.shape))
            fh.write(data.tobytes())


def _read_exact(fh, n, what):
    buf = fh.read(n)
    if len(buf) != n:
        raise CheckpointError(
            f"truncated checkpoint: expected {n} bytes for {what} at offset "
            f"{fh.tell() - len(buf)}, got {len(buf)}"
        )
    return buf


def load_tensors(path) -> dict[str, np.ndarray]:
    out: dict[str, np.ndarray] = {}
    with open(path, "rb") as fh:
        magic = _read_exact(fh, 4, "magic")
        if magic != MAGIC:
            raise CheckpointError(f"bad magic {magic!r} at offset 0, expected {MAGIC!r}")
        version, count = struct.unpack("<II", _read_exact(fh, 8, "header"))
        if version != VERSION:
            raise CheckpointError(f"unsupported checkpoint version {version}")
        for i in range(count):
            (name_len,) = struct.unpack("<I", _read_exact(fh, 4, f"entry {i} name length"))
            name = _read_exact(fh, name_len, f"entry {i} name").decode("utf-8")
            (rank,) = struct.unpack("<I", _read_exact(fh, 4, f"{name} rank"))
            dims = struct.unpack(f"<{rank}I", _read_exact(fh, 4 * rank, f"{name} dims"))
            n_values = int(np.prod(dims)) if rank else 1
            raw = _read_exact(fh, 4 * n_values, f"{name} values")
            out[name] = np.frombuffer(raw, dtype="<f4").reshape(dims).copy()
        trailing = fh.read(1)
        if trailing:
            raise CheckpointError(f"unexpected trailing bytes at offset {fh.tell() - 1}")
    return out
