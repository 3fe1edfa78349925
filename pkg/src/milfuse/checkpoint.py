"""Binary parameter checkpoints.

Layout: magic ``PM3W``, format version (u32), entry count (u32), then per
entry: name length (u16) + UTF-8 name, rank (u8), dims (u32 each), payload
as float32 little-endian in row-major order. All header integers are
little-endian. Round trips are bit-exact.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .errors import BadMagicError, DimMismatchError

MAGIC = b"PM3W"
VERSION = 1


def save_parameters(path, named_arrays) -> None:
    """Write ``(name, array-or-tensor)`` pairs in the given order."""
    entries = []
    seen = set()
    for name, value in named_arrays:
        if name in seen:
            raise ValueError(f"duplicate parameter name {name!r}")
        seen.add(name)
        arr = np.ascontiguousarray(np.asarray(getattr(value, "data", value), dtype="<f4"))
        entries.append((name, arr))

    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", VERSION, len(entries)))
        for name, arr in entries:
            raw = name.encode("utf-8")
            if len(raw) > 0xFFFF:
                raise ValueError(f"parameter name too long: {name!r}")
            if arr.ndim > 0xFF:
                raise ValueError(f"rank too large for {name!r}")
            fh.write(struct.pack("<H", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<B", arr.ndim))
            for dim in arr.shape:
                fh.write(struct.pack("<I", dim))
            fh.write(arr.tobytes(order="C"))


def load_parameters(path) -> dict:
    """Read a checkpoint back as an ordered ``{name: float32 array}`` dict."""
    blob = Path(path).read_bytes()
    if blob[:4] != MAGIC:
        raise BadMagicError(f"{path}: expected magic {MAGIC!r}, got {blob[:4]!r}")
    version, count = struct.unpack_from("<II", blob, 4)
    if version != VERSION:
        raise BadMagicError(f"{path}: unsupported format version {version}")
    out = {}
    off = 12
    for _ in range(count):
        (nlen,) = struct.unpack_from("<H", blob, off)
        off += 2
        name = blob[off : off + nlen].decode("utf-8")
        off += nlen
        (rank,) = struct.unpack_from("<B", blob, off)
        off += 1
        dims = struct.unpack_from(f"<{rank}I", blob, off) if rank else ()
        off += 4 * rank
        n = int(np.prod(dims, dtype=np.int64)) if rank else 1
        nbytes = 4 * n
        if off + nbytes > len(blob):
            raise DimMismatchError(f"{path}: payload for {name!r} truncated")
        arr = np.frombuffer(blob[off : off + nbytes], dtype="<f4").reshape(dims)
        off += nbytes
        out[name] = np.ascontiguousarray(arr)
    if off != len(blob):
        raise DimMismatchError(f"{path}: {len(blob) - off} trailing bytes")
    return out
