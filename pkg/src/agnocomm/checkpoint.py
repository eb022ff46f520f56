"""Binary tensor checkpoint format.

Layout (all integers little-endian)::

    b"AGNO"                      magic
    u32   format version
    u32   tensor count
    per tensor, in order:
        u32   name length, name bytes (utf-8)
        u32   rank
        u64 × rank   dims
    payloads: each tensor's values as row-major little-endian float64

Round trips are bit-exact.
"""

from __future__ import annotations

import os
import struct
from pathlib import Path
from typing import Mapping

import numpy as np

from .errors import ConfigurationError

MAGIC = b"AGNO"
FORMAT_VERSION = 1


def dumps(tensors: Mapping[str, np.ndarray]) -> bytes:
    header = [MAGIC, struct.pack("<II", FORMAT_VERSION, len(tensors))]
    payload = []
    for name, value in tensors.items():
        arr = np.asarray(value, dtype="<f8")
        raw = name.encode("utf-8")
        header.append(struct.pack("<I", len(raw)))
        header.append(raw)
        header.append(struct.pack("<I", arr.ndim))
        header.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        payload.append(arr.tobytes(order="C"))
    return b"".join(header + payload)


def loads(data: bytes) -> dict[str, np.ndarray]:
    try:
        return _loads(data)
    except (struct.error, UnicodeDecodeError, ValueError) as exc:
        if isinstance(exc, ConfigurationError):
            raise
        raise ConfigurationError(f"corrupt checkpoint: {exc}") from None


def _loads(data: bytes) -> dict[str, np.ndarray]:
    if data[:4] != MAGIC:
        raise ConfigurationError("not an AGNO checkpoint (bad magic)")
    version, count = struct.unpack_from("<II", data, 4)
    if version != FORMAT_VERSION:
        raise ConfigurationError(f"unsupported checkpoint version {version}")
    off = 12
    manifest = []
    for _ in range(count):
        (nlen,) = struct.unpack_from("<I", data, off)
        off += 4
        name = data[off:off + nlen].decode("utf-8")
        off += nlen
        (rank,) = struct.unpack_from("<I", data, off)
        off += 4
        dims = struct.unpack_from(f"<{rank}Q", data, off)
        off += 8 * rank
        manifest.append((name, dims))
    out = {}
    for name, dims in manifest:
        n = int(np.prod(dims, dtype=np.int64))
        if off + 8 * n > len(data):
            raise ConfigurationError(f"checkpoint truncated while reading {name!r}")
        out[name] = np.frombuffer(data, dtype="<f8", count=n, offset=off).reshape(dims).astype(np.float64)
        off += 8 * n
    if off != len(data):
        raise ConfigurationError("trailing bytes after checkpoint payload")
    return out


def save(path: str | os.PathLike, tensors: Mapping[str, np.ndarray]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(dumps(tensors))
    os.replace(tmp, path)
    return path


def load(path: str | os.PathLike) -> dict[str, np.ndarray]:
    path = Path(path)
    if not path.exists():
        raise ConfigurationError(f"checkpoint not found: {path}")
    return loads(path.read_bytes())
