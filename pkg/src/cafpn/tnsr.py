"""TNSR binary tensor files and ``name path`` manifests.

Layout (little-endian): ``b"TNSR"``, u8 version (1), u8 dtype code
(0 float32, 1 float64), u8 ndim, u8 reserved (0), ndim x u64 extents,
then the row-major payload with no padding.
"""

from __future__ import annotations

import os
import struct
from pathlib import Path
from typing import Mapping

import numpy as np

MAGIC = b"TNSR"
VERSION = 1
_CODES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_HEADER = struct.Struct("<4sBBBB")


class TnsrError(ValueError):
    """Malformed TNSR data; ``offset`` is the byte position of the violation."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


def dumps(x: np.ndarray) -> bytes:
    x = np.asarray(x)
    if x.dtype == np.float32:
        code = 0
    elif x.dtype == np.float64:
        code = 1
    else:
        raise TypeError(f"TNSR stores float32/float64 only, got {x.dtype}")
    if x.ndim > 255:
        raise ValueError("too many dimensions")
    header = _HEADER.pack(MAGIC, VERSION, code, x.ndim, 0)
    dims = struct.pack(f"<{x.ndim}Q", *x.shape)
    return header + dims + np.ascontiguousarray(x, dtype=_CODES[code]).tobytes()


def loads(buf: bytes) -> np.ndarray:
    if len(buf) < _HEADER.size:
        raise TnsrError("truncated header", len(buf))
    magic, version, code, ndim, reserved = _HEADER.unpack_from(buf, 0)
    if magic != MAGIC:
        raise TnsrError(f"bad magic {magic!r}", 0)
    if version != VERSION:
        raise TnsrError(f"unsupported version {version}", 4)
    if code not in _CODES:
        raise TnsrError(f"unknown dtype code {code}", 5)
    if reserved != 0:
        raise TnsrError(f"reserved byte is {reserved}, expected 0", 7)
    off = _HEADER.size
    if len(buf) < off + 8 * ndim:
        raise TnsrError("truncated extents", len(buf))
    dims = struct.unpack_from(f"<{ndim}Q", buf, off)
    for i, d in enumerate(dims):
        if d == 0:
            raise TnsrError("zero extent", off + 8 * i)
    off += 8 * ndim
    dtype = _CODES[code]
    expected = int(np.prod(dims, dtype=np.int64)) * dtype.itemsize
    if len(buf) - off != expected:
        raise TnsrError(
            f"payload is {len(buf) - off} bytes, expected {expected}", off + min(len(buf) - off, expected)
        )
    data = np.frombuffer(buf, dtype=dtype, offset=off).reshape(dims)
    return data.astype(dtype.newbyteorder("="), copy=True)


def save(path: str | os.PathLike, x: np.ndarray) -> None:
    Path(path).write_bytes(dumps(x))


def load(path: str | os.PathLike) -> np.ndarray:
    return loads(Path(path).read_bytes())


def save_manifest(directory: str | os.PathLike, tensors: Mapping[str, np.ndarray],
                  manifest_name: str = "manifest.txt") -> Path:
    """Write each tensor to ``<name>.tnsr`` and list them in a manifest."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    lines = []
    for name, arr in tensors.items():
        if any(ch.isspace() for ch in name):
            raise ValueError(f"tensor name {name!r} contains whitespace")
        fname = f"{name}.tnsr"
        save(directory / fname, arr)
        lines.append(f"{name} {fname}")
    manifest = directory / manifest_name
    manifest.write_text("\n".join(lines) + "\n")
    return manifest


def load_manifest(path: str | os.PathLike) -> dict[str, np.ndarray]:
    """Read a ``name path`` manifest; relative paths resolve against its directory."""
    path = Path(path)
    out: dict[str, np.ndarray] = {}
    for lineno, line in enumerate(path.read_text().splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split()
        if len(parts) != 2:
            raise ValueError(f"{path}:{lineno}: expected 'name path', got {line!r}")
        name, rel = parts
        if name in out:
            raise ValueError(f"{path}:{lineno}: duplicate tensor {name!r}")
        target = Path(rel)
        if not target.is_absolute():
            target = path.parent / target
        out[name] = load(target)
    return out
