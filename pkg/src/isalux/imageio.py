"""PNG decoding/encoding (the only image codec).

Images are exchanged as (3,H,W) float32 arrays in [0,1]. 8-bit RGB PNGs
round-trip losslessly; 16-bit inputs are downconverted with a warning.
"""
from __future__ import annotations

import warnings

import numpy as np
from PIL import Image

from .errors import DataError


def load_png(path: str) -> np.ndarray:
    try:
        img = Image.open(path)
        img.load()
    except Exception as exc:
        raise DataError(f"{path}: cannot decode PNG ({exc})") from exc
    if img.mode in ("I", "I;16", "I;16B", "I;16L"):
        warnings.warn(f"{path}: 16-bit PNG downconverted to 8-bit")
        arr16 = np.asarray(img, dtype=np.uint32)
        arr = (arr16 // 257).astype(np.uint8)
        img = Image.fromarray(arr).convert("RGB")
    elif img.mode != "RGB":
        img = img.convert("RGB")
    arr = np.asarray(img, dtype=np.uint8)
    return (arr.astype(np.float32) / 255.0).transpose(2, 0, 1)


def save_png(path: str, arr: np.ndarray) -> None:
    if arr.ndim != 3 or arr.shape[0] != 3:
        raise DataError(f"save_png expects (3,H,W), got {arr.shape}")
    quantized = np.clip(np.rint(arr * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(quantized.transpose(1, 2, 0), mode="RGB").save(path, format="PNG")
