"""Image and raw tensor file IO.

PNG images round-trip through 8-bit RGB: loading maps to [0, 1] by v/255,
saving quantizes by round(v*255) with clamping. Paths ending in ``.atns``
dispatch to the raw tensor format instead.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np
from PIL import Image, UnidentifiedImageError

from .atns import AtnsFormatError, read_atns, write_atns


class ImageFormatError(ValueError):
    """Unsupported or malformed image file."""


def load_image(path) -> np.ndarray:
    """Load a PNG (or ATNS tensor) as a float32 (3, H, W) array in [0, 1]."""
    p = Path(path)
    if p.suffix.lower() == ".atns":
        try:
            return read_atns(p).astype(np.float32)
        except AtnsFormatError as exc:
            raise ImageFormatError(str(exc)) from exc
    try:
        with Image.open(p) as img:
            rgb = img.convert("RGB")
            arr = np.asarray(rgb, dtype=np.float32) / 255.0
    except (UnidentifiedImageError, OSError) as exc:
        raise ImageFormatError(f"{p}: not a readable image ({exc})") from exc
    return arr.transpose(2, 0, 1).copy()


def save_image(array: np.ndarray, path) -> None:
    """Save a (3, H, W) or (H, W) array in [0, 1] as 8-bit PNG (or ATNS)."""
    p = Path(path)
    arr = np.asarray(array)
    if p.suffix.lower() == ".atns":
        write_atns(p, arr.astype(np.float32))
        return
    if arr.ndim == 2:
        arr = np.stack([arr] * 3)
    if arr.ndim != 3 or arr.shape[0] != 3:
        raise ImageFormatError(f"save_image: expected (3, H, W), got {arr.shape}")
    quantized = np.clip(np.round(arr * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(quantized.transpose(1, 2, 0), mode="RGB").save(p, format="PNG")
