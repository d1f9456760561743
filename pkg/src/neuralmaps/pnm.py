"""Portable graymap (P2/P5) codec, 8-bit only."""

from __future__ import annotations

import os

import numpy as np


class PgmError(ValueError):
    pass


def _tokens(data: bytes, count: int, pos: int) -> tuple[list[bytes], int]:
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
            raise PgmError("unexpected end of header")
        out.append(data[start:pos])
    return out, pos


def decode_pgm(data: bytes, name: str = "<bytes>") -> np.ndarray:
    """Decode a P5 or P2 graymap into an (H, W) uint8 array."""
    magic = data[:2]
    if magic not in (b"P5", b"P2"):
        if magic in (b"P3", b"P6"):
            raise PgmError(f"{name}: color pixmap {magic.decode()} not supported, convert to grayscale")
        raise PgmError(f"{name}: malformed header, magic {magic!r}")
    try:
        (w, h, maxval), pos = _tokens(data, 3, 2)
        width, height, maxval = int(w), int(h), int(maxval)
    except (PgmError, ValueError) as exc:
        raise PgmError(f"{name}: malformed header ({exc})") from None
    if width < 1 or height < 1:
        raise PgmError(f"{name}: malformed header, dims {width}x{height}")
    if maxval != 255:
        raise PgmError(f"{name}: maxval {maxval} unsupported, expected 255")
    count = width * height
    if magic == b"P5":
        # exactly one whitespace byte separates header from raster
        raster = data[pos + 1:pos + 1 + count]
        if len(raster) != count:
            raise PgmError(f"{name}: truncated raster, {len(raster)} of {count} bytes")
        return np.frombuffer(raster, dtype=np.uint8).reshape(height, width).copy()
    values = data[pos:].split()
    if len(values) < count:
        raise PgmError(f"{name}: truncated raster, {len(values)} of {count} samples")
    arr = np.array([int(v) for v in values[:count]])
    if arr.min(initial=0) < 0 or arr.max(initial=0) > maxval:
        raise PgmError(f"{name}: sample outside [0, {maxval}]")
    return arr.astype(np.uint8).reshape(height, width)


def read_pgm(path: str | os.PathLike) -> np.ndarray:
    """Read a graymap as float64 values in [0, 1]."""
    with open(path, "rb") as f:
        raw = f.read()
    return decode_pgm(raw, str(path)).astype(np.float64) / 255.0


def encode_pgm(image: np.ndarray) -> bytes:
    img = np.asarray(image, dtype=np.float64)
    if img.ndim != 2:
        raise PgmError(f"expected a 2-d image, got shape {img.shape}")
    pixels = np.rint(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)
    h, w = pixels.shape
    return b"P5\n%d %d\n255\n" % (w, h) + pixels.tobytes()


def write_pgm(image: np.ndarray, path: str | os.PathLike) -> None:
    """Write values in [0, 1] as binary P5, 255 levels, rounded to nearest."""
    payload = encode_pgm(image)
    try:
        with open(path, "wb") as f:
            f.write(payload)
    except OSError as exc:
        raise OSError(f"cannot write PGM to {path}: {exc}") from exc
