"""Raster file formats.

* 16-bit grayscale PNG (values in [0, 1] scaled to 0..65535); RGB PNGs are
  read as ``(rows, cols, 3)``.
* ``.raw`` float64 rasters: an ASCII header of ``key: value`` lines ending
  with a blank line, then little-endian float64 samples in row-major order.
  The header records ``extent`` and ``domain`` (``sensor`` or ``texture``).
* Masks as 8-bit PNG (0 or 255).
"""

from __future__ import annotations

from pathlib import Path

import numpy as np
from PIL import Image

__all__ = ["read_image", "read_mask", "read_raw", "write_image", "write_mask", "write_raw"]

RAW_MAGIC = "LFRAW 1"


def write_raw(path, arr, domain: str = "texture") -> None:
    arr = np.ascontiguousarray(arr, dtype="<f8")
    extent = " ".join(str(n) for n in arr.shape)
    header = f"{RAW_MAGIC}\nextent: {extent}\ndomain: {domain}\n\n"
    with open(path, "wb") as fh:
        fh.write(header.encode("ascii"))
        fh.write(arr.tobytes())


def read_raw(path, with_header: bool = False):
    blob = Path(path).read_bytes()
    end = blob.find(b"\n\n")
    if end < 0 or not blob.startswith(RAW_MAGIC.encode()):
        raise ValueError(f"{path}: not a raw raster file")
    meta = {}
    for line in blob[:end].decode("ascii").splitlines()[1:]:
        key, _, val = line.partition(":")
        meta[key.strip()] = val.strip()
    shape = tuple(int(n) for n in meta["extent"].split())
    data = np.frombuffer(blob[end + 2:], dtype="<f8")
    if data.size != int(np.prod(shape)):
        raise ValueError(f"{path}: expected {np.prod(shape)} samples, found {data.size}")
    arr = data.reshape(shape).astype(float)
    return (arr, meta) if with_header else arr


def write_image(path, arr) -> None:
    """Write ``arr`` (clipped to [0, 1]) as 16-bit PNG, or .raw by suffix."""
    path = Path(path)
    if path.suffix == ".raw":
        write_raw(path, arr)
        return
    arr = np.asarray(arr, dtype=float)
    q = np.round(np.clip(arr, 0.0, 1.0) * 65535).astype(np.uint16)
    if q.ndim == 2:
        Image.fromarray(q).save(path)
    else:
        # Pillow has no 16-bit RGB writer; store 8 bits per channel
        Image.fromarray((q >> 8).astype(np.uint8)).save(path)


def read_image(path) -> np.ndarray:
    """Read a PNG (any bit depth) or .raw raster as float in [0, 1]."""
    path = Path(path)
    if path.suffix == ".raw":
        return read_raw(path)
    with Image.open(path) as im:
        mode = im.mode
        arr = np.asarray(im)
    if arr.dtype == np.bool_:
        return arr.astype(float)
    if mode in ("I;16", "I;16B", "I;16L", "I"):
        return arr.astype(float) / 65535.0
    arr = arr.astype(float) / 255.0
    if arr.ndim == 3:
        arr = arr[..., :3]
    return arr


def write_mask(path, mask) -> None:
    Image.fromarray(np.where(np.asarray(mask, dtype=bool), 255, 0).astype(np.uint8)).save(path)


def read_mask(path) -> np.ndarray:
    with Image.open(path) as im:
        arr = np.asarray(im.convert("L"))
    return arr >= 128
