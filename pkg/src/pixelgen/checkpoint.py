"""Binary tensor container.

Layout (all integers little-endian)::

    b"PXGN" | version u32 | count u32
    repeated count times, names in lexicographic order:
        name_len u32 | name utf-8 | dtype u8 | rank u8 | dims u32 * rank | payload
"""

from __future__ import annotations

import os
import struct
from pathlib import Path

import numpy as np

from pixelgen.errors import FormatError, PixelGenError, VersionError

MAGIC = b"PXGN"
VERSION = 1

DTYPE_CODES = {
    np.dtype("<f4"): 0,
    np.dtype("<f8"): 1,
    np.dtype("<i8"): 2,
    np.dtype("<i4"): 3,
    np.dtype("u1"): 4,
    np.dtype("<u8"): 5,
}
CODE_DTYPES = {v: k for k, v in DTYPE_CODES.items()}


def encode(tensors: dict[str, np.ndarray]) -> bytes:
    parts = [MAGIC, struct.pack("<II", VERSION, len(tensors))]
    for name in sorted(tensors):
        arr = np.asarray(tensors[name])
        dt = arr.dtype.newbyteorder("<") if arr.dtype.byteorder == ">" else arr.dtype
        if dt not in DTYPE_CODES:
            raise PixelGenError(f"tensor {name!r}: unsupported dtype {arr.dtype}")
        raw_name = name.encode("utf-8")
        parts.append(struct.pack("<I", len(raw_name)))
        parts.append(raw_name)
        parts.append(struct.pack("<BB", DTYPE_CODES[dt], arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype=dt.newbyteorder("<")).tobytes())
    return b"".join(parts)


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.buf):
            raise FormatError(f"truncated while reading {what}: need {n} bytes, "
                              f"{len(self.buf) - self.pos} left", self.pos)
        out = self.buf[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str, what: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def decode(buf: bytes) -> dict[str, np.ndarray]:
    """Parse a blob; nothing is returned unless the whole buffer is valid."""
    r = _Reader(buf)
    if r.take(4, "magic") != MAGIC:
        raise FormatError("bad magic, not a checkpoint", 0)
    (version,) = r.unpack("<I", "version")
    if version != VERSION:
        raise VersionError(f"checkpoint version {version}, this build reads {VERSION}", 4)
    (count,) = r.unpack("<I", "tensor count")
    out: dict[str, np.ndarray] = {}
    prev = None
    for _ in range(count):
        start = r.pos
        (n,) = r.unpack("<I", "name length")
        try:
            name = r.take(n, "name").decode("utf-8")
        except UnicodeDecodeError as exc:
            raise FormatError("tensor name is not utf-8", start + 4) from exc
        if prev is not None and name <= prev:
            raise FormatError(f"tensor {name!r} out of order or duplicated", start)
        prev = name
        code, rank = r.unpack("<BB", "dtype/rank")
        if code not in CODE_DTYPES:
            raise FormatError(f"unknown dtype code {code} for {name!r}", r.pos - 2)
        dims = r.unpack(f"<{rank}I", "dims")
        dt = CODE_DTYPES[code]
        nbytes = int(np.prod(dims, dtype=np.int64)) * dt.itemsize
        payload = r.take(nbytes, f"payload of {name!r}")
        out[name] = np.frombuffer(payload, dtype=dt).reshape(dims).astype(dt.newbyteorder("="))
    if r.pos != len(buf):
        raise FormatError(f"{len(buf) - r.pos} trailing bytes", r.pos)
    return out


def save(path, tensors: dict[str, np.ndarray]) -> Path:
    """Write atomically: a crash mid-write never leaves a partial file at ``path``."""
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    try:
        tmp.write_bytes(encode(tensors))
        os.replace(tmp, path)
    except OSError as exc:
        raise PixelGenError(f"cannot write checkpoint {path}: {exc}") from exc
    return path


def load(path) -> dict[str, np.ndarray]:
    path = Path(path)
    try:
        buf = path.read_bytes()
    except OSError as exc:
        raise PixelGenError(f"cannot read checkpoint {path}: {exc}") from exc
    try:
        return decode(buf)
    except FormatError as exc:
        err = type(exc)(f"{path}: {exc.args[0]}")
        err.offset = exc.offset
        raise err from exc
