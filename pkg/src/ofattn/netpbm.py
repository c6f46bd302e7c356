"""Binary PPM (P6) / PGM (P5) with maxval 255."""

from __future__ import annotations

import os
from pathlib import Path

import numpy as np


class NetpbmError(ValueError):
    def __init__(self, msg: str, offset: int):
        super().__init__(f"{msg} (byte offset {offset})")
        self.offset = offset


def encode(array: np.ndarray) -> bytes:
    a = np.asarray(array)
    if a.dtype != np.uint8:
        if a.min(initial=0) < 0 or a.max(initial=0) > 255:
            raise ValueError("netpbm values must be in [0, 255]")
        a = a.astype(np.uint8)
    if a.ndim == 2:
        magic = b"P5"
    elif a.ndim == 3 and a.shape[2] == 3:
        magic = b"P6"
    else:
        raise ValueError(f"cannot encode array of shape {a.shape}")
    h, w = a.shape[:2]
    return magic + b"\n%d %d\n255\n" % (w, h) + np.ascontiguousarray(a).tobytes()


def _tokens(data: bytes, count: int, pos: int):
    out = []
    n = len(data)
    while len(out) < count:
        while pos < n and (data[pos:pos + 1].isspace() or data[pos:pos + 1] == b"#"):
            if data[pos:pos + 1] == b"#":
                while pos < n and data[pos:pos + 1] not in (b"\n", b"\r"):
                    pos += 1
            else:
                pos += 1
        if pos >= n:
            raise NetpbmError("truncated header", pos)
        start = pos
        while pos < n and data[pos:pos + 1].isdigit():
            pos += 1
        if start == pos:
            raise NetpbmError(f"expected a decimal number, got {data[pos:pos + 1]!r}", pos)
        out.append((int(data[start:pos]), start))
    return out, pos


def decode(data: bytes, expect: bytes | None = None) -> np.ndarray:
    magic = data[:2]
    if magic not in (b"P5", b"P6") or (expect is not None and magic != expect):
        raise NetpbmError(f"bad magic {magic!r}, expected {(expect or b'P5/P6')!r}", 0)
    ((w, _), (h, _), (maxval, mpos)), pos = _tokens(data, 3, 2)
    if maxval != 255:
        raise NetpbmError(f"unsupported maxval {maxval}", mpos)
    if w < 1 or h < 1:
        raise NetpbmError(f"bad dimensions {w}x{h}", 2)
    if pos >= len(data) or not data[pos:pos + 1].isspace():
        raise NetpbmError("missing whitespace after maxval", pos)
    pos += 1
    channels = 3 if magic == b"P6" else 1
    need = w * h * channels
    payload = data[pos:pos + need]
    if len(payload) < need:
        raise NetpbmError(f"truncated payload: expected {need} bytes, got {len(payload)}", pos + len(payload))
    a = np.frombuffer(payload, dtype=np.uint8)
    return a.reshape(h, w, 3).copy() if channels == 3 else a.reshape(h, w).copy()


def _atomic_write(path: Path, data: bytes):
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(data)
    os.replace(tmp, path)


def write_ppm(path, image: np.ndarray):
    image = np.asarray(image)
    if image.ndim != 3 or image.shape[2] != 3:
        raise ValueError(f"PPM needs an H x W x 3 array, got {image.shape}")
    _atomic_write(path, encode(image))


def write_pgm(path, gray: np.ndarray):
    gray = np.asarray(gray)
    if gray.ndim != 2:
        raise ValueError(f"PGM needs an H x W array, got {gray.shape}")
    _atomic_write(path, encode(gray))


def read_ppm(path) -> np.ndarray:
    return decode(Path(path).read_bytes(), b"P6")


def read_pgm(path) -> np.ndarray:
    return decode(Path(path).read_bytes(), b"P5")
