"""Reading and writing PNG and binary PNM (PPM/PGM) images.

Only 8-bit images are supported. Arrays are returned as uint8, grayscale
[H, W] or RGB [H, W, 3]; normalization and label validation happen in the
dataset layer.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np
from PIL import Image

__all__ = ["read_image", "write_png", "write_pgm", "write_ppm"]


def _read_pnm(path: Path) -> np.ndarray:
    data = path.read_bytes()
    if data[:2] not in (b"P5", b"P6"):
        raise ValueError(f"{path}: only binary PGM (P5) and PPM (P6) are supported")
    # header tokens: magic, width, height, maxval; comments start with '#'
    tokens: list[bytes] = []
    pos = 2
    while len(tokens) < 3 and pos < len(data):
        while pos < len(data) and data[pos : pos + 1].isspace():
            pos += 1
        if data[pos : pos + 1] == b"#":
            while pos < len(data) and data[pos : pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos : pos + 1].isspace():
            pos += 1
        tokens.append(data[start:pos])
    pos += 1  # single whitespace byte after maxval
    width, height, maxval = (int(t) for t in tokens)
    if maxval != 255:
        raise ValueError(f"{path}: only maxval 255 supported, got {maxval}")
    channels = 3 if data[:2] == b"P6" else 1
    need = width * height * channels
    raw = np.frombuffer(data, dtype=np.uint8, count=need, offset=pos)
    if raw.size < need:
        raise ValueError(f"{path}: truncated pixel data")
    arr = raw.reshape(height, width, channels)
    return arr[..., 0] if channels == 1 else arr


def read_image(path: str | Path) -> np.ndarray:
    """Read a PNG/PGM/PPM file as uint8, [H, W] or [H, W, 3]."""
    path = Path(path)
    suffix = path.suffix.lower()
    if suffix in (".pgm", ".ppm", ".pnm"):
        return _read_pnm(path)
    if suffix == ".png":
        with Image.open(path) as img:
            if img.mode in ("1", "L", "P", "I;16", "I"):
                img = img.convert("L")
                return np.asarray(img, dtype=np.uint8)
            img = img.convert("RGB")
            return np.asarray(img, dtype=np.uint8)
    raise ValueError(f"{path}: unsupported image format {suffix!r} (PNG/PGM/PPM only)")


def _to_uint8(arr: np.ndarray) -> np.ndarray:
    arr = np.asarray(arr)
    if arr.dtype == np.uint8:
        return arr
    if np.issubdtype(arr.dtype, np.floating):
        return np.clip(np.rint(arr * 255.0), 0, 255).astype(np.uint8)
    return np.clip(arr, 0, 255).astype(np.uint8)


def write_png(path: str | Path, arr: np.ndarray) -> None:
    """Write [H, W] grayscale or [H, W, 3] RGB; floats are scaled from [0, 1]."""
    arr = _to_uint8(arr)
    mode = "L" if arr.ndim == 2 else "RGB"
    Image.fromarray(arr, mode=mode).save(Path(path))


def write_pgm(path: str | Path, arr: np.ndarray) -> None:
    """Write a binary PGM (P5); floats are scaled from [0, 1]."""
    arr = _to_uint8(arr)
    if arr.ndim != 2:
        raise ValueError(f"PGM needs a 2-D array, got shape {arr.shape}")
    h, w = arr.shape
    Path(path).write_bytes(b"P5\n%d %d\n255\n" % (w, h) + arr.tobytes())


def write_ppm(path: str | Path, arr: np.ndarray) -> None:
    """Write a binary PPM (P6) from [H, W, 3]; floats are scaled from [0, 1]."""
    arr = _to_uint8(arr)
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise ValueError(f"PPM needs an [H, W, 3] array, got shape {arr.shape}")
    h, w = arr.shape[:2]
    Path(path).write_bytes(b"P6\n%d %d\n255\n" % (w, h) + arr.tobytes())
