"""Binary tensor files (``SE2T``) and small image importers.

Layout of one SE2T block::

    b"SE2T" | u32 rank | rank x u32 dims | u8 precision (4 or 8) | raw LE scalars

All integers are little-endian. Scalars are row-major.
"""

from __future__ import annotations

import io
import os
import struct
import tempfile
from pathlib import Path
from typing import BinaryIO

import numpy as np

MAGIC = b"SE2T"


class TensorFormatError(ValueError):
    pass


def write_tensor(stream: BinaryIO, array: np.ndarray) -> None:
    arr = np.asarray(array)
    if arr.dtype == np.float32:
        flag, dt = 4, "<f4"
    elif arr.dtype == np.float64:
        flag, dt = 8, "<f8"
    else:
        raise TensorFormatError(f"unsupported dtype {arr.dtype}")
    stream.write(MAGIC)
    stream.write(struct.pack("<I", arr.ndim))
    stream.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
    stream.write(struct.pack("<B", flag))
    stream.write(np.ascontiguousarray(arr, dtype=dt).tobytes())


def read_tensor(stream: BinaryIO) -> np.ndarray:
    magic = stream.read(4)
    if magic != MAGIC:
        raise TensorFormatError(f"bad tensor magic {magic!r}")
    rank = _unpack(stream, "<I")[0]
    dims = _unpack(stream, f"<{rank}I") if rank else ()
    flag = _unpack(stream, "<B")[0]
    if flag not in (4, 8):
        raise TensorFormatError(f"bad precision flag {flag}")
    dt = np.dtype("<f4" if flag == 4 else "<f8")
    count = int(np.prod(dims)) if rank else 1
    raw = stream.read(count * dt.itemsize)
    if len(raw) != count * dt.itemsize:
        raise TensorFormatError("truncated tensor data")
    native = np.float32 if flag == 4 else np.float64
    return np.frombuffer(raw, dtype=dt).astype(native).reshape(dims)


def _unpack(stream: BinaryIO, fmt: str) -> tuple:
    size = struct.calcsize(fmt)
    raw = stream.read(size)
    if len(raw) != size:
        raise TensorFormatError("truncated tensor header")
    return struct.unpack(fmt, raw)


def tensor_bytes(array: np.ndarray) -> bytes:
    buf = io.BytesIO()
    write_tensor(buf, array)
    return buf.getvalue()


def atomic_write_bytes(path: str | os.PathLike, payload: bytes) -> None:
    """Write to a temp file in the target directory, then rename over ``path``."""
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent or ".", prefix=path.name + ".", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def save_tensor(path: str | os.PathLike, array: np.ndarray) -> None:
    atomic_write_bytes(path, tensor_bytes(array))


def load_tensor(path: str | os.PathLike) -> np.ndarray:
    with open(path, "rb") as fh:
        arr = read_tensor(fh)
        if fh.read(1):
            raise TensorFormatError("trailing bytes after tensor")
    return arr


def read_netpbm(path: str | os.PathLike) -> np.ndarray:
    """Read binary PGM (P5) or PPM (P6) into ``[H, W, C]`` float32 in [0, 1]."""
    data = Path(path).read_bytes()
    tokens: list[bytes] = []
    pos = 0
    while len(tokens) < 4:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            while pos < len(data) and data[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise TensorFormatError("truncated netpbm header")
        tokens.append(data[start:pos])
    pos += 1  # single whitespace byte before the raster
    kind, w, h, maxval = tokens[0], int(tokens[1]), int(tokens[2]), int(tokens[3])
    if kind not in (b"P5", b"P6"):
        raise TensorFormatError(f"unsupported netpbm type {kind!r}")
    channels = 1 if kind == b"P5" else 3
    dt = np.dtype(">u2") if maxval > 255 else np.dtype("u1")
    count = w * h * channels
    raster = data[pos:pos + count * dt.itemsize]
    if len(raster) != count * dt.itemsize:
        raise TensorFormatError("truncated netpbm raster")
    img = np.frombuffer(raster, dtype=dt).reshape(h, w, channels)
    return (img.astype(np.float32) / np.float32(maxval))
