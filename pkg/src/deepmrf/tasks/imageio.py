"""8-bit image files: binary PGM/PPM (P5/P6) natively, PNG through Pillow.

In memory, images are float arrays of shape (H, W, channels) in [0, 1].
"""

from __future__ import annotations

import re
from pathlib import Path

import numpy as np


class ImageFormatError(ValueError):
    pass


def as_image(arr) -> np.ndarray:
    a = np.asarray(arr)
    if a.dtype == np.uint8:
        a = a.astype(np.float64) / 255.0
    if a.ndim == 2:
        a = a[..., None]
    if a.ndim != 3 or a.shape[2] not in (1, 3):
        raise ImageFormatError(f"expected (H, W, 1|3) image, got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise ImageFormatError("image contains non-finite samples")
    return a


def to_uint8(img) -> np.ndarray:
    img = as_image(img)
    return np.clip(np.floor(np.clip(img, 0, 1) * 255.0 + 0.5), 0, 255).astype(np.uint8)


_TOKEN = re.compile(rb"(?:\s|#[^\n]*\n)*(\S+)")


def _read_pnm(data: bytes) -> np.ndarray:
    pos = 0
    tokens = []
    while len(tokens) < 4:
        m = _TOKEN.match(data, pos)
        if not m:
            raise ImageFormatError("truncated PNM header")
        tokens.append(m.group(1))
        pos = m.end()
    magic, w, h, maxval = tokens[0], int(tokens[1]), int(tokens[2]), int(tokens[3])
    if magic not in (b"P5", b"P6"):
        raise ImageFormatError(f"unsupported PNM type {magic!r}")
    if not 0 < maxval < 256:
        raise ImageFormatError(f"only 8-bit PNM supported (maxval={maxval})")
    ch = 1 if magic == b"P5" else 3
    pos += 1  # single whitespace after maxval
    n = w * h * ch
    if len(data) - pos < n:
        raise ImageFormatError("truncated PNM pixel data")
    px = np.frombuffer(data, np.uint8, n, pos).reshape(h, w, ch)
    return px.astype(np.float64) / maxval


def _write_pnm(path: Path, img: np.ndarray) -> None:
    u8 = to_uint8(img)
    h, w, ch = u8.shape
    magic = b"P5" if ch == 1 else b"P6"
    with open(path, "wb") as f:
        f.write(magic + b"\n%d %d\n255\n" % (w, h))
        f.write(u8.tobytes())


def read_image(path) -> np.ndarray:
    path = Path(path)
    data = path.read_bytes()
    if data[:2] in (b"P5", b"P6"):
        return _read_pnm(data)
    if data[:8] == b"\x89PNG\r\n\x1a\n":
        from PIL import Image

        with Image.open(path) as im:
            if im.mode not in ("L", "RGB"):
                im = im.convert("RGB" if "A" in im.mode or im.mode == "P" else "L")
            return as_image(np.asarray(im, dtype=np.uint8))
    raise ImageFormatError(f"{path}: unrecognised image format")


def write_image(path, img) -> None:
    path = Path(path)
    suffix = path.suffix.lower()
    if suffix in (".pgm", ".ppm", ".pnm"):
        img = as_image(img)
        if suffix == ".pgm" and img.shape[2] != 1:
            raise ImageFormatError("PGM holds a single channel")
        if suffix == ".ppm" and img.shape[2] == 1:
            img = np.repeat(img, 3, axis=2)
        _write_pnm(path, img)
    elif suffix == ".png":
        from PIL import Image

        u8 = to_uint8(img)
        Image.fromarray(u8[..., 0] if u8.shape[2] == 1 else u8).save(path, format="PNG", optimize=False)
    else:
        raise ImageFormatError(f"unsupported output extension {suffix!r}")
