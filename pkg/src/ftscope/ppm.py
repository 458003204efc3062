"""Binary PPM (P6, maxval 255) reading and writing, bit-exact across platforms."""

from __future__ import annotations

import numpy as np


class PPMError(ValueError):
    """Malformed PPM data."""


def write_ppm(path: str, image: np.ndarray):
    """Write a [3, H, W] image with values in [0, 1]; pixel = round(255 * v)."""
    arr = np.asarray(image, dtype=np.float64)
    if arr.ndim != 3 or arr.shape[0] != 3:
        raise PPMError(f"expected [3, H, W] image, got {arr.shape}")
    bytes_ = np.clip(np.rint(arr * 255.0), 0, 255).astype(np.uint8)
    h, w = arr.shape[1], arr.shape[2]
    with open(path, "wb") as f:
        f.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        f.write(bytes_.transpose(1, 2, 0).tobytes())


def _read_token(data: bytes, pos: int) -> tuple:
    while pos < len(data):
        if data[pos:pos + 1].isspace():
            pos += 1
        elif data[pos:pos + 1] == b"#":
            while pos < len(data) and data[pos:pos + 1] != b"\n":
                pos += 1
        else:
            break
    start = pos
    while pos < len(data) and not data[pos:pos + 1].isspace():
        pos += 1
    if start == pos:
        raise PPMError("truncated PPM header")
    return data[start:pos], pos


def read_ppm(path: str) -> np.ndarray:
    """Read a P6 file into a [3, H, W] float array with values byte/255."""
    with open(path, "rb") as f:
        data = f.read()
    magic, pos = _read_token(data, 0)
    if magic != b"P6":
        raise PPMError(f"not a binary PPM (magic {magic!r})")
    wtok, pos = _read_token(data, pos)
    htok, pos = _read_token(data, pos)
    mtok, pos = _read_token(data, pos)
    try:
        w, h, maxval = int(wtok), int(htok), int(mtok)
    except ValueError as e:
        raise PPMError(f"bad PPM header: {e}") from e
    if maxval != 255:
        raise PPMError(f"only maxval 255 supported, got {maxval}")
    pos += 1  # single whitespace after maxval
    need = w * h * 3
    raw = data[pos:pos + need]
    if len(raw) != need:
        raise PPMError(f"PPM pixel data truncated: need {need} bytes, have {len(raw)}")
    pixels = np.frombuffer(raw, dtype=np.uint8).reshape(h, w, 3)
    return pixels.transpose(2, 0, 1).astype(np.float64) / 255.0


def tile_grid(images, pad: int = 1, pad_value: float = 1.0) -> np.ndarray:
    """Tile same-sized [3, H, W] images into a near-square contact sheet."""
    images = list(images)
    if not images:
        raise PPMError("tile_grid needs at least one image")
    h, w = images[0].shape[1], images[0].shape[2]
    cols = int(np.ceil(np.sqrt(len(images))))
    rows = int(np.ceil(len(images) / cols))
    sheet = np.full((3, rows * (h + pad) - pad, cols * (w + pad) - pad), pad_value)
    for i, img in enumerate(images):
        r, c = divmod(i, cols)
        sheet[:, r * (h + pad):r * (h + pad) + h, c * (w + pad):c * (w + pad) + w] = img
    return sheet
