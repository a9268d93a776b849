"""Minimal binary PPM (P6) and PGM (P5) readers/writers."""

from __future__ import annotations

import numpy as np


def to_uint8(img: np.ndarray) -> np.ndarray:
    """Map a [-1, 1] float image (3,H,W) to HxWx3 uint8."""
    x = np.clip(img, -1.0, 1.0)
    x = np.round((x + 1.0) * 127.5)
    return x.astype(np.uint8).transpose(1, 2, 0)


def from_uint8(img: np.ndarray) -> np.ndarray:
    """Inverse of to_uint8 (up to quantization)."""
    return (img.astype(np.float32).transpose(2, 0, 1) / 127.5) - 1.0


def write_ppm(path, rgb: np.ndarray) -> None:
    rgb = np.asarray(rgb, dtype=np.uint8)
    if rgb.ndim != 3 or rgb.shape[2] != 3:
        raise ValueError(f"write_ppm: need HxWx3, got {rgb.shape}")
    h, w = rgb.shape[:2]
    with open(path, "wb") as f:
        f.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        f.write(rgb.tobytes())


def write_pgm(path, gray: np.ndarray) -> None:
    gray = np.asarray(gray, dtype=np.uint8)
    if gray.ndim != 2:
        raise ValueError(f"write_pgm: need HxW, got {gray.shape}")
    h, w = gray.shape
    with open(path, "wb") as f:
        f.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        f.write(gray.tobytes())


def _read_header(f, magic):
    if f.read(2) != magic:
        raise ValueError(f"not a {magic.decode()} file")
    vals = []
    while len(vals) < 3:
        line = f.readline()
        if not line:
            raise ValueError("truncated header")
        body = line.split(b"#", 1)[0]
        vals.extend(int(v) for v in body.split())
    w, h, maxval = vals[:3]
    if maxval != 255:
        raise ValueError(f"only maxval 255 supported, got {maxval}")
    return w, h


def read_ppm(path) -> np.ndarray:
    with open(path, "rb") as f:
        w, h = _read_header(f, b"P6")
        data = f.read(w * h * 3)
    return np.frombuffer(data, dtype=np.uint8).reshape(h, w, 3).copy()


def read_pgm(path) -> np.ndarray:
    with open(path, "rb") as f:
        w, h = _read_header(f, b"P5")
        data = f.read(w * h)
    return np.frombuffer(data, dtype=np.uint8).reshape(h, w).copy()
