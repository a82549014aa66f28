"""8-bit RGB PNG decode/encode as [3,H,W] float arrays in [0,1]."""
from __future__ import annotations

import numpy as np
from PIL import Image

from .tensor import DTYPE


def read_png(path) -> np.ndarray:
    with Image.open(path) as im:
        rgb = im.convert("RGB")
        arr = np.asarray(rgb, dtype=np.uint8)
    return (arr.transpose(2, 0, 1).astype(DTYPE) / DTYPE(255.0)).astype(DTYPE)


def write_png(path, values: np.ndarray) -> None:
    a = np.asarray(values, dtype=np.float64)
    if a.ndim != 3 or a.shape[0] != 3:
        raise ValueError(f"PNG writer expects [3,H,W], got shape {a.shape}")
    q = np.clip(np.rint(a * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(q.transpose(1, 2, 0), mode="RGB").save(path, format="PNG")
