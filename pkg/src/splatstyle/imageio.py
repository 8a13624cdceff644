"""Image buffer export: 8-bit PNG and lossless raw float32 fixtures."""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np
from PIL import Image


def to_uint8(img: np.ndarray) -> np.ndarray:
    """Linear [0,1] -> rounded 8-bit (sRGB-naive, per the export contract).

    Rounds half-up via truncation of x*255 + 0.5; the maximum is exactly
    255.5, which truncates to 255.
    """
    return (np.clip(img, 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)


def save_png(img: np.ndarray, path) -> None:
    arr = to_uint8(img)
    if arr.ndim == 2:
        Image.fromarray(arr, mode="L").save(path)
    else:
        Image.fromarray(arr, mode="RGB").save(path)


def load_png(path) -> np.ndarray:
    """PNG/JPEG -> float RGB in [0,1], shape (H, W, 3)."""
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float64)
    return arr / 255.0


def save_raw(img: np.ndarray, path) -> None:
    """8-byte (width,height uint32 LE) header + float32 LE pixels, row-major."""
    img = np.asarray(img)
    if img.ndim == 2:
        h, w = img.shape
    elif img.ndim == 3 and img.shape[2] in (1, 3):
        h, w = img.shape[:2]
    else:
        raise ValueError(f"unsupported raw image shape {img.shape}")
    payload = struct.pack("<II", w, h) + img.astype("<f4").tobytes()
    Path(path).write_bytes(payload)


def load_raw(path) -> np.ndarray:
    data = Path(path).read_bytes()
    if len(data) < 8:
        raise ValueError("raw image file too short for header")
    w, h = struct.unpack("<II", data[:8])
    flat = np.frombuffer(data[8:], dtype="<f4").astype(np.float64)
    if flat.size == w * h:
        return flat.reshape(h, w)
    if flat.size == w * h * 3:
        return flat.reshape(h, w, 3)
    raise ValueError(f"raw payload size {flat.size} does not match {w}x{h} (1 or 3 channels)")
