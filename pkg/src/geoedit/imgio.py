"""Minimal netpbm image IO: binary PGM (8/16-bit) and PPM.

These formats are header-plus-raster with no compression, which keeps the
on-disk artifacts inspectable with standard tools and diffable in tests.
16-bit samples are big-endian per the netpbm convention.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np


def _read_netpbm(path: Path, magic: bytes):
    raw = path.read_bytes()
    if not raw.startswith(magic):
        raise OSError(f"{path}: expected {magic.decode()} file")
    # Header tokens may be separated by arbitrary whitespace and '#' comments.
    tokens = []
    pos = len(magic)
    while len(tokens) < 3:
        while pos < len(raw) and raw[pos : pos + 1].isspace():
            pos += 1
        if pos < len(raw) and raw[pos : pos + 1] == b"#":
            while pos < len(raw) and raw[pos : pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(raw) and not raw[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            raise OSError(f"{path}: truncated header")
        tokens.append(int(raw[start:pos]))
    pos += 1  # single whitespace byte after maxval
    width, height, maxval = tokens
    return raw[pos:], width, height, maxval


def write_pgm8(path: str | Path, img: np.ndarray) -> None:
    """Write an H x W uint8 array as binary PGM."""
    img = np.ascontiguousarray(np.asarray(img, dtype=np.uint8))
    if img.ndim != 2:
        raise ValueError(f"PGM wants H x W, got {img.shape}")
    h, w = img.shape
    Path(path).write_bytes(b"P5\n%d %d\n255\n" % (w, h) + img.tobytes())


def read_pgm8(path: str | Path) -> np.ndarray:
    path = Path(path)
    body, w, h, maxval = _read_netpbm(path, b"P5")
    if maxval != 255:
        raise OSError(f"{path}: expected maxval 255, got {maxval}")
    if len(body) < w * h:
        raise OSError(f"{path}: raster truncated")
    return np.frombuffer(body[: w * h], dtype=np.uint8).reshape(h, w).copy()


def write_pgm16(path: str | Path, img: np.ndarray) -> None:
    """Write an H x W uint16 array as binary PGM (big-endian samples)."""
    img = np.asarray(img, dtype=np.uint16)
    if img.ndim != 2:
        raise ValueError(f"PGM wants H x W, got {img.shape}")
    h, w = img.shape
    body = np.ascontiguousarray(img.astype(">u2")).tobytes()
    Path(path).write_bytes(b"P5\n%d %d\n65535\n" % (w, h) + body)


def read_pgm16(path: str | Path) -> np.ndarray:
    path = Path(path)
    body, w, h, maxval = _read_netpbm(path, b"P5")
    if maxval != 65535:
        raise OSError(f"{path}: expected maxval 65535, got {maxval}")
    n = w * h * 2
    if len(body) < n:
        raise OSError(f"{path}: raster truncated")
    return np.frombuffer(body[:n], dtype=">u2").reshape(h, w).astype(np.uint16)


def write_ppm(path: str | Path, img: np.ndarray) -> None:
    """Write an H x W x 3 uint8 array as binary PPM."""
    img = np.ascontiguousarray(np.asarray(img, dtype=np.uint8))
    if img.ndim != 3 or img.shape[2] != 3:
        raise ValueError(f"PPM wants H x W x 3, got {img.shape}")
    h, w, _ = img.shape
    Path(path).write_bytes(b"P6\n%d %d\n255\n" % (w, h) + img.tobytes())


def read_ppm(path: str | Path) -> np.ndarray:
    path = Path(path)
    body, w, h, maxval = _read_netpbm(path, b"P6")
    if maxval != 255:
        raise OSError(f"{path}: expected maxval 255, got {maxval}")
    n = w * h * 3
    if len(body) < n:
        raise OSError(f"{path}: raster truncated")
    return np.frombuffer(body[:n], dtype=np.uint8).reshape(h, w, 3).copy()


def float_to_unit8(img: np.ndarray) -> np.ndarray:
    """Quantize a float image in [0, 1] to uint8 by round-half-up at 255."""
    return np.clip(np.rint(np.asarray(img) * 255.0), 0, 255).astype(np.uint8)


def unit8_to_float(img: np.ndarray) -> np.ndarray:
    """Dequantize uint8 back to floats in [0, 1]."""
    return np.asarray(img, dtype=np.float64) / 255.0
