"""Grayscale PFM (``Pf``) read/write for disparity maps.

Scanlines are stored bottom-up per the format; a negative scale field marks a
little-endian payload. Round trips are bit-exact.
"""
from __future__ import annotations

import numpy as np


class PfmError(ValueError):
    """Malformed PFM file."""


def write_pfm(path, values: np.ndarray, scale: float = -1.0) -> None:
    a = np.asarray(values, dtype=np.float32)
    if a.ndim != 2:
        raise PfmError(f"PFM writer expects [H,W], got shape {a.shape}")
    if scale == 0:
        raise PfmError("scale must be nonzero")
    h, w = a.shape
    data = a[::-1]  # bottom-up scanlines
    if scale < 0:
        payload = data.astype("<f4").tobytes()
    else:
        payload = data.astype(">f4").tobytes()
    with open(path, "wb") as fh:
        fh.write(b"Pf\n")
        fh.write(f"{w} {h}\n".encode("ascii"))
        fh.write(f"{scale:g}\n".encode("ascii"))
        fh.write(payload)


def _token(fh) -> bytes:
    """Next whitespace-delimited header token (PFM allows any whitespace)."""
    tok = b""
    while True:
        c = fh.read(1)
        if not c:
            raise PfmError("unexpected end of PFM header")
        if c.isspace():
            if tok:
                return tok
            continue
        tok += c


def read_pfm(path) -> np.ndarray:
    with open(path, "rb") as fh:
        magic = _token(fh)
        if magic == b"PF":
            raise PfmError("color PFM is not supported, expected grayscale 'Pf'")
        if magic != b"Pf":
            raise PfmError(f"not a PFM file (magic {magic!r})")
        try:
            w = int(_token(fh))
            h = int(_token(fh))
            scale = float(_token(fh))
        except ValueError as exc:
            raise PfmError("malformed PFM header") from exc
        if w <= 0 or h <= 0 or scale == 0:
            raise PfmError(f"bad PFM dimensions/scale: {w}x{h}, scale {scale}")
        dtype = "<f4" if scale < 0 else ">f4"
        payload = fh.read(4 * w * h)
        if len(payload) != 4 * w * h:
            raise PfmError(f"truncated PFM payload: got {len(payload)} bytes, "
                           f"need {4 * w * h}")
        data = np.frombuffer(payload, dtype=dtype).reshape(h, w)
    return np.ascontiguousarray(data[::-1]).astype(np.float32)
