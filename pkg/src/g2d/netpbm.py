"""Binary PPM (P6) / PGM (P5) reading and writing, maxval 255."""

from __future__ import annotations

from pathlib import Path

import numpy as np


def to_bytes(image: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(np.asarray(image) * 255.0), 0, 255).astype(np.uint8)


def quantize(image: np.ndarray) -> np.ndarray:
    """Round-trip a [0, 1] image through 8-bit storage."""
    return to_bytes(image).astype(np.float64) / 255.0


def write_ppm(path, image: np.ndarray) -> None:
    """Write a 3 x H x W float image in [0, 1]."""
    if image.ndim != 3 or image.shape[0] != 3:
        raise ValueError(f"PPM expects 3 x H x W, got {image.shape}")
    _, h, w = image.shape
    data = to_bytes(image).transpose(1, 2, 0).tobytes()
    Path(path).write_bytes(b"P6\n%d %d\n255\n" % (w, h) + data)


def write_pgm(path, image: np.ndarray) -> None:
    """Write an H x W float image in [0, 1]."""
    if image.ndim != 2:
        raise ValueError(f"PGM expects H x W, got {image.shape}")
    h, w = image.shape
    Path(path).write_bytes(b"P5\n%d %d\n255\n" % (w, h) + to_bytes(image).tobytes())


def _read(path, magic: bytes):
    raw = Path(path).read_bytes()
    fields = []
    pos = 0
    while len(fields) < 4:
        while raw[pos:pos + 1].isspace():
            pos += 1
        if raw[pos:pos + 1] == b"#":
            pos = raw.index(b"\n", pos) + 1
            continue
        end = pos
        while not raw[end:end + 1].isspace():
            end += 1
        fields.append(raw[pos:end])
        pos = end
    if fields[0] != magic:
        raise ValueError(f"{path}: expected {magic.decode()} header, got {fields[0]!r}")
    w, h, maxval = (int(f) for f in fields[1:])
    if maxval != 255:
        raise ValueError(f"{path}: unsupported maxval {maxval}")
    return raw[pos + 1:], w, h


def read_ppm(path) -> np.ndarray:
    body, w, h = _read(path, b"P6")
    arr = np.frombuffer(body, dtype=np.uint8, count=w * h * 3).reshape(h, w, 3)
    return arr.transpose(2, 0, 1).astype(np.float64) / 255.0


def read_pgm(path) -> np.ndarray:
    body, w, h = _read(path, b"P5")
    return np.frombuffer(body, dtype=np.uint8, count=w * h).reshape(h, w).astype(np.float64) / 255.0
