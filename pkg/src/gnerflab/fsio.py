"""Atomic file helpers; a killed run never leaves a truncated artifact."""

from __future__ import annotations

import io
import os

import numpy as np
from PIL import Image


def atomic_write_bytes(path, data):
    tmp = f"{path}.tmp.{os.getpid()}"
    with open(tmp, "wb") as f:
        f.write(data)
        f.flush()
        os.fsync(f.fileno())
    os.replace(tmp, path)


def atomic_write_text(path, text):
    atomic_write_bytes(path, text.encode("utf-8"))


def save_png(path, array_u8):
    """Write an [H,W,3] uint8 array as PNG, atomically."""
    arr = np.asarray(array_u8)
    if arr.dtype != np.uint8:
        raise ValueError("save_png expects uint8 data")
    buf = io.BytesIO()
    Image.fromarray(arr, mode="RGB").save(buf, format="PNG")
    atomic_write_bytes(path, buf.getvalue())


def load_png(path):
    """Read a PNG into an [H,W,3] uint8 array."""
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"))
