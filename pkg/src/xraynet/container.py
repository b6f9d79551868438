"""Versioned little-endian binary container for named tensors.

Layout::

    magic   4 bytes  b"XRNT"
    version u32
    meta    u32 length + UTF-8 JSON
    count   u32
    count x record:
        name   u16 length + UTF-8
        dtype  u8  (see _DTYPES)
        ndim   u8
        shape  ndim x u32
        data   little-endian payload
    end     4 bytes  b"END!"
"""

from __future__ import annotations

import io
import json
import struct
from pathlib import Path

import numpy as np

MAGIC = b"XRNT"
END = b"END!"
VERSION = 1

_DTYPES = {0: "<f4", 1: "<f8", 2: "<i8", 3: "<u4", 4: "<i4"}
_CODES = {np.dtype(v): k for k, v in _DTYPES.items()}


class ContainerError(ValueError):
    """Base class for unreadable container files."""


class TruncatedFileError(ContainerError):
    pass


class VersionMismatchError(ContainerError):
    pass


class BadMagicError(ContainerError):
    pass


def write_container(path, tensors: dict[str, np.ndarray], meta: dict) -> None:
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<I", VERSION))
    blob = json.dumps(meta, sort_keys=True).encode()
    buf.write(struct.pack("<I", len(blob)))
    buf.write(blob)
    buf.write(struct.pack("<I", len(tensors)))
    for name, arr in tensors.items():
        arr = np.asarray(arr)
        dt = arr.dtype.newbyteorder("<") if arr.dtype.byteorder == ">" else arr.dtype
        code = _CODES.get(np.dtype(dt).newbyteorder("<"))
        if code is None:
            raise TypeError(f"unsupported dtype {arr.dtype} for tensor {name!r}")
        raw = name.encode()
        buf.write(struct.pack("<H", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<BB", code, arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(np.ascontiguousarray(arr, dtype=_DTYPES[code]).tobytes())
    buf.write(END)
    Path(path).write_bytes(buf.getvalue())


class _Reader:
    def __init__(self, data: bytes, path):
        self.data = data
        self.pos = 0
        self.path = path

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise TruncatedFileError(f"{self.path}: truncated file (needed {n} bytes at offset {self.pos})")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def read_container(path) -> tuple[dict[str, np.ndarray], dict]:
    """Read a container; raises a ContainerError subclass on any defect."""
    r = _Reader(Path(path).read_bytes(), path)
    magic = r.take(4)
    if magic != MAGIC:
        raise BadMagicError(f"{path}: bad magic {magic!r}, not a tensor container")
    (version,) = r.unpack("<I")
    if version != VERSION:
        raise VersionMismatchError(f"{path}: container version {version}, this build reads version {VERSION}")
    (mlen,) = r.unpack("<I")
    try:
        meta = json.loads(r.take(mlen).decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ContainerError(f"{path}: corrupt metadata block ({exc})") from None
    (count,) = r.unpack("<I")
    tensors: dict[str, np.ndarray] = {}
    for _ in range(count):
        (nlen,) = r.unpack("<H")
        name = r.take(nlen).decode()
        code, ndim = r.unpack("<BB")
        if code not in _DTYPES:
            raise ContainerError(f"{path}: unknown dtype code {code} for tensor {name!r}")
        shape = r.unpack(f"<{ndim}I") if ndim else ()
        dt = np.dtype(_DTYPES[code])
        nbytes = int(np.prod(shape, dtype=np.int64)) * dt.itemsize
        arr = np.frombuffer(r.take(nbytes), dtype=dt).reshape(shape)
        tensors[name] = arr.astype(dt.newbyteorder("="))
    if r.take(4) != END:
        raise ContainerError(f"{path}: missing end marker")
    if r.pos != len(r.data):
        raise ContainerError(f"{path}: {len(r.data) - r.pos} trailing bytes after end marker")
    return tensors, meta
