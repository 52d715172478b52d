"""Grayscale PGM (P2 and P5, 8 and 16 bit) reading and writing.

Pixel values are normalized to ``[0, 1]`` on read and rounded to the nearest
level on write.  16-bit binary samples are big-endian as the format requires.
"""

from __future__ import annotations

import os
from pathlib import Path

import numpy as np

__all__ = ["PGMError", "read_pgm", "write_pgm", "parse_pgm", "encode_pgm"]


class PGMError(ValueError):
    pass


def _tokens(data: bytes, count: int, pos: int = 0):
    """Read ``count`` whitespace-separated header tokens, skipping ``#`` comments."""
    out = []
    n = len(data)
    while len(out) < count:
        while pos < n and data[pos:pos + 1].isspace():
            pos += 1
        if pos < n and data[pos:pos + 1] == b"#":
            while pos < n and data[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < n and not data[pos:pos + 1].isspace() and data[pos:pos + 1] != b"#":
            pos += 1
        if start == pos:
            raise PGMError("truncated PGM header")
        out.append(data[start:pos])
    return out, pos


def parse_pgm(data: bytes) -> np.ndarray:
    magic, pos = _tokens(data, 1)
    magic = magic[0]
    if magic not in (b"P2", b"P5"):
        raise PGMError(f"not a grayscale PGM (magic {magic!r})")
    (w, h, maxval), pos = _tokens(data, 3, pos)
    try:
        width, height, maxval = int(w), int(h), int(maxval)
    except ValueError as exc:
        raise PGMError("non-integer PGM header field") from exc
    if width < 1 or height < 1 or not 0 < maxval < 65536:
        raise PGMError(f"invalid PGM header: {width}x{height}, maxval {maxval}")
    count = width * height
    if magic == b"P5":
        pos += 1  # single whitespace after maxval
        dtype = np.dtype(">u2") if maxval > 255 else np.dtype("u1")
        raw = data[pos:pos + count * dtype.itemsize]
        if len(raw) < count * dtype.itemsize:
            raise PGMError("truncated PGM pixel data")
        pixels = np.frombuffer(raw, dtype=dtype).astype(float)
    else:
        body = b" ".join(
            line.split(b"#", 1)[0] for line in data[pos:].splitlines()
        ).split()
        if len(body) < count:
            raise PGMError("truncated PGM pixel data")
        pixels = np.array([int(t) for t in body[:count]], dtype=float)
    if np.any(pixels > maxval):
        raise PGMError("pixel value exceeds maxval")
    return (pixels / maxval).reshape(height, width)


def read_pgm(path) -> np.ndarray:
    """Read a PGM file as a float image in ``[0, 1]``."""
    return parse_pgm(Path(path).read_bytes())


def encode_pgm(img, maxval: int = 255, binary: bool = True) -> bytes:
    x = np.asarray(img, dtype=float)
    if x.ndim != 2:
        raise PGMError(f"expected a 2-D image, got shape {x.shape}")
    if not 0 < maxval < 65536:
        raise PGMError("maxval must be in 1..65535")
    if not np.all(np.isfinite(x)):
        raise PGMError("image has non-finite pixels")
    levels = np.rint(np.clip(x, 0.0, 1.0) * maxval).astype(np.int64)
    height, width = x.shape
    header = f"{'P5' if binary else 'P2'}\n{width} {height}\n{maxval}\n".encode("ascii")
    if binary:
        dtype = ">u2" if maxval > 255 else "u1"
        return header + levels.astype(dtype).tobytes()
    rows = "\n".join(" ".join(str(v) for v in row) for row in levels)
    return header + rows.encode("ascii") + b"\n"


def write_pgm(path, img, maxval: int = 255, binary: bool = True) -> None:
    """Write atomically (temp file then rename)."""
    path = Path(path)
    data = encode_pgm(img, maxval, binary)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(data)
    os.replace(tmp, path)
