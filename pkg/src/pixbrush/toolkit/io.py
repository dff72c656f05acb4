"""PNG reading/writing and the texture-map <-> image orientation.

Maps are indexed ``[i, j]`` with ``i`` along u and ``j`` along v (v = 0 at the
bottom). Images are row-major with row 0 at the top, as OBJ viewers expect.
"""

from __future__ import annotations

import io
import os
import tempfile
from pathlib import Path

import numpy as np
from PIL import Image


def map_to_image(m: np.ndarray) -> np.ndarray:
    return np.swapaxes(m, 0, 1)[::-1].copy()


def image_to_map(img: np.ndarray) -> np.ndarray:
    return np.swapaxes(img[::-1], 0, 1).copy()


def atomic_write_bytes(path, data: bytes) -> Path:
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    return path


def atomic_write_text(path, text: str) -> Path:
    return atomic_write_bytes(path, text.encode("utf-8"))


def to_uint(img: np.ndarray, bits: int = 8) -> np.ndarray:
    top = (1 << bits) - 1
    q = np.rint(np.clip(np.asarray(img, dtype=np.float64), 0.0, 1.0) * top)
    return q.astype(np.uint8 if bits == 8 else np.uint16)


def encode_png(img: np.ndarray, bits: int = 8) -> bytes:
    """Encode a float image in [0, 1] (H x W or H x W x 3) as PNG bytes."""
    if bits not in (8, 16):
        raise ValueError("bits must be 8 or 16")
    q = to_uint(img, bits)
    if bits == 16:
        if q.ndim != 2:
            raise ValueError("16-bit export supports grayscale images only")
        pil = Image.fromarray(q.astype(np.uint16))
    else:
        pil = Image.fromarray(q)
    buf = io.BytesIO()
    pil.save(buf, format="PNG")
    return buf.getvalue()


def write_png(path, img: np.ndarray, bits: int = 8) -> Path:
    return atomic_write_bytes(path, encode_png(img, bits))


def read_image(path, gray: bool = False) -> np.ndarray:
    """Read a PNG as float64 in [0, 1]: H x W x 3, or H x W with ``gray=True``."""
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"image not found: {path}")
    with Image.open(path) as pil:
        if pil.mode in ("I;16", "I;16B", "I;16L", "I"):
            arr = np.asarray(pil, dtype=np.float64) / 65535.0
            return arr if gray else np.repeat(arr[..., None], 3, axis=-1)
        if gray:
            return np.asarray(pil.convert("L"), dtype=np.float64) / 255.0
        return np.asarray(pil.convert("RGB"), dtype=np.float64) / 255.0


def read_texture(path, resolution: int) -> np.ndarray:
    """Read an image texture as an R x R x 3 map (resampled if needed)."""
    img = read_image(path)
    if img.shape[:2] != (resolution, resolution):
        with Image.open(path) as pil:
            pil = pil.convert("RGB").resize((resolution, resolution), Image.BILINEAR)
            img = np.asarray(pil, dtype=np.float64) / 255.0
    return image_to_map(img)
