"""Binary file formats: guidance maps / masks and the ``SRDF`` checkpoint container.

Map file (little-endian)::

    b"FAM1" | u32 H | u32 W | u8 flags (bit 0: binary mask) | 3 pad bytes | H*W float32

Checkpoint container (little-endian)::

    b"SRDF" | u32 version | u32 entry count | entries...
    entry: u16 name length | name (utf-8) | u8 dtype code | u8 ndim | u32 dims[ndim] | raw data

Model parameters and optimizer moments are stored as float32 blobs; RNG states
and a JSON metadata record are stored as uint8 blobs.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

MAP_MAGIC = b"FAM1"
CKPT_MAGIC = b"SRDF"
CKPT_VERSION = 1
META_KEY = "__meta__"

_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8"), 2: np.dtype("<i8"), 3: np.dtype("u1")}
_CODES = {np.dtype(v).str: k for k, v in _DTYPES.items()}


class FormatError(ValueError):
    """A file does not match the expected binary layout."""


def save_map(path, values, binary: bool = False) -> Path:
    m = np.asarray(values)
    if m.ndim != 2:
        raise ValueError(f"map must be 2-D, got shape {m.shape}")
    if binary and not np.all(np.isin(m, (0, 1))):
        raise ValueError("binary flag set but map is not 0/1")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    header = MAP_MAGIC + struct.pack("<IIB3x", m.shape[0], m.shape[1], 1 if binary else 0)
    path.write_bytes(header + m.astype("<f4").tobytes())
    return path


def load_map(path, *, with_flags: bool = False):
    buf = Path(path).read_bytes()
    if len(buf) < 16 or buf[:4] != MAP_MAGIC:
        raise FormatError(f"{path}: not a map file (bad magic {buf[:4]!r})")
    h, w, flags = struct.unpack_from("<IIB3x", buf, 4)
    if len(buf) != 16 + 4 * h * w:
        raise FormatError(f"{path}: expected {16 + 4 * h * w} bytes for {h}x{w}, found {len(buf)}")
    m = np.frombuffer(buf, dtype="<f4", offset=16).reshape(h, w).astype(np.float32)
    binary = bool(flags & 1)
    return (m, binary) if with_flags else m


def save_container(path, arrays: dict, meta: dict | None = None) -> Path:
    """Write named arrays (and an optional JSON-able ``meta`` dict) to an SRDF file."""
    entries = dict(arrays)
    if meta is not None:
        entries[META_KEY] = np.frombuffer(json.dumps(meta, sort_keys=True).encode(), dtype=np.uint8)
    chunks = [CKPT_MAGIC, struct.pack("<II", CKPT_VERSION, len(entries))]
    for name, arr in entries.items():
        arr = np.asarray(arr)
        le = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
        if le.dtype.str not in _CODES:
            raise TypeError(f"entry {name!r}: unsupported dtype {arr.dtype}")
        code = _CODES[le.dtype.str]
        raw_name = name.encode()
        chunks.append(struct.pack("<H", len(raw_name)) + raw_name)
        chunks.append(struct.pack("<BB", code, le.ndim) + struct.pack(f"<{le.ndim}I", *le.shape))
        chunks.append(np.ascontiguousarray(le).tobytes())
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(b"".join(chunks))
    tmp.replace(path)
    return path


def load_container(path):
    """Read an SRDF file; returns ``(arrays, meta)``."""
    buf = Path(path).read_bytes()
    if buf[:4] != CKPT_MAGIC:
        raise FormatError(f"{path}: bad magic {buf[:4]!r}, expected {CKPT_MAGIC!r}")
    if len(buf) < 12:
        raise FormatError(f"{path}: truncated header")
    version, count = struct.unpack_from("<II", buf, 4)
    if version != CKPT_VERSION:
        raise FormatError(f"{path}: format version {version} unsupported (expected {CKPT_VERSION})")
    pos, arrays = 12, {}
    try:
        for _ in range(count):
            (n,) = struct.unpack_from("<H", buf, pos)
            name = buf[pos + 2 : pos + 2 + n].decode()
            pos += 2 + n
            code, ndim = struct.unpack_from("<BB", buf, pos)
            pos += 2
            shape = struct.unpack_from(f"<{ndim}I", buf, pos)
            pos += 4 * ndim
            dtype = _DTYPES[code]
            size = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
            if pos + size > len(buf):
                raise FormatError(f"{path}: entry {name!r} truncated")
            arrays[name] = np.frombuffer(buf, dtype=dtype, count=size // dtype.itemsize, offset=pos).reshape(shape).copy()
            pos += size
    except (struct.error, KeyError, UnicodeDecodeError) as exc:
        raise FormatError(f"{path}: corrupt entry table ({exc})") from exc
    if pos != len(buf):
        raise FormatError(f"{path}: {len(buf) - pos} trailing bytes")
    meta = None
    if META_KEY in arrays:
        meta = json.loads(arrays.pop(META_KEY).tobytes().decode())
    return arrays, meta


__all__ = ["FormatError", "save_map", "load_map", "save_container", "load_container"]
