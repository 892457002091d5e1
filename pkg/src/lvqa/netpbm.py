"""Binary PPM (P6) and PGM (P5) readers and writers, 8-bit, maxval 255."""

from __future__ import annotations

from pathlib import Path

import numpy as np


def _write(path, magic: bytes, header_dims: tuple[int, int], payload: bytes) -> None:
    w, h = header_dims
    with open(path, "wb") as f:
        f.write(magic + b"\n%d %d\n255\n" % (w, h))
        f.write(payload)


def write_ppm(path, image: np.ndarray) -> None:
    """Write a (3, H, W) float image in [0, 1] or uint8 array as binary PPM."""
    image = np.asarray(image)
    if image.ndim != 3 or image.shape[0] != 3:
        raise ValueError(f"expected (3, H, W) image, got {image.shape}")
    if image.dtype != np.uint8:
        image = (np.clip(image, 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)
    _, h, w = image.shape
    _write(path, b"P6", (w, h), image.transpose(1, 2, 0).tobytes())


def write_pgm(path, image: np.ndarray) -> None:
    """Write an (H, W) float image in [0, 1] or uint8 array as binary PGM."""
    image = np.asarray(image)
    if image.ndim != 2:
        raise ValueError(f"expected (H, W) image, got {image.shape}")
    if image.dtype != np.uint8:
        image = (np.clip(image, 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)
    h, w = image.shape
    _write(path, b"P5", (w, h), image.tobytes())


def _read_header(data: bytes, magic: bytes):
    # Header tokens may be separated by arbitrary whitespace or comments.
    if not data.startswith(magic):
        raise ValueError(f"not a {magic.decode()} file")
    pos = len(magic)
    fields = []
    while len(fields) < 3:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            while pos < len(data) and data[pos:pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace():
            pos += 1
        fields.append(int(data[start:pos]))
    pos += 1  # single whitespace byte after maxval
    w, h, maxval = fields
    if maxval != 255:
        raise ValueError(f"only maxval 255 supported, got {maxval}")
    return w, h, pos


def read_ppm(path) -> np.ndarray:
    """Read a binary PPM into a (3, H, W) uint8 array."""
    data = Path(path).read_bytes()
    w, h, pos = _read_header(data, b"P6")
    pixels = np.frombuffer(data, dtype=np.uint8, count=w * h * 3, offset=pos)
    return pixels.reshape(h, w, 3).transpose(2, 0, 1).copy()


def read_pgm(path) -> np.ndarray:
    """Read a binary PGM into an (H, W) uint8 array."""
    data = Path(path).read_bytes()
    w, h, pos = _read_header(data, b"P5")
    return np.frombuffer(data, dtype=np.uint8, count=w * h, offset=pos).reshape(h, w).copy()
