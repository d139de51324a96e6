"""8-bit PNG exchange for images and masks.

Float images live in [0, 1]; export clips, quantizes with round-half-up,
and writes RGB PNG.  Masks are single-channel 8-bit PNG scaled to [0, 1].
"""

from __future__ import annotations

import io
from pathlib import Path

import numpy as np
from PIL import Image

__all__ = ["read_image", "write_image", "encode_png", "read_mask", "write_mask"]


def _quantize(data: np.ndarray) -> np.ndarray:
    clipped = np.clip(np.asarray(data, dtype=np.float64), 0.0, 1.0)
    return np.floor(clipped * 255.0 + 0.5).astype(np.uint8)


def write_image(path: str | Path, data: np.ndarray) -> None:
    arr = np.asarray(data, dtype=np.float64)
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise ValueError(f"write_image: need an (H, W, 3) array, got shape {arr.shape}")
    Image.fromarray(_quantize(arr), mode="RGB").save(path, format="PNG")


def encode_png(data: np.ndarray) -> bytes:
    arr = np.asarray(data, dtype=np.float64)
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise ValueError(f"encode_png: need an (H, W, 3) array, got shape {arr.shape}")
    buf = io.BytesIO()
    Image.fromarray(_quantize(arr), mode="RGB").save(buf, format="PNG")
    return buf.getvalue()


def read_image(path: str | Path) -> np.ndarray:
    with Image.open(path) as im:
        rgb = im.convert("RGB")
        return np.asarray(rgb, dtype=np.float64) / 255.0


def write_mask(path: str | Path, data: np.ndarray) -> None:
    arr = np.asarray(data, dtype=np.float64)
    if arr.ndim != 2:
        raise ValueError(f"write_mask: need an (H, W) array, got shape {arr.shape}")
    Image.fromarray(_quantize(arr), mode="L").save(path, format="PNG")


def read_mask(path: str | Path) -> np.ndarray:
    with Image.open(path) as im:
        gray = im.convert("L")
        return np.asarray(gray, dtype=np.float64) / 255.0
