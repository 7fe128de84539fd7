"""Binary artifact formats: ODT1 tensors and PPM/PGM images.

ODT1 layout, all little-endian:

    bytes 0..3   magic "ODT1"
    byte  4      dtype tag: 1 = float32, 2 = float64
    bytes 5..8   rank, u32
    then rank    extents, u32 each
    then         payload, row-major

Images are float arrays in [-1, 1], written as 8-bit binary PPM (P6,
3-channel) or PGM (P5, masks/grayscale).
"""

from __future__ import annotations

import struct

import numpy as np

MAGIC = b"ODT1"
_TAG_FOR = {np.dtype(np.float32): 1, np.dtype(np.float64): 2}
_DTYPE_FOR = {1: np.dtype("<f4"), 2: np.dtype("<f8")}


def write_odt(path, arr):
    arr = np.ascontiguousarray(arr)
    if arr.dtype not in _TAG_FOR:
        raise ValueError(f"ODT1 stores f32/f64 only, got {arr.dtype}")
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<B", _TAG_FOR[arr.dtype]))
        f.write(struct.pack("<I", arr.ndim))
        for d in arr.shape:
            f.write(struct.pack("<I", d))
        f.write(arr.astype(arr.dtype.newbyteorder("<"), copy=False).tobytes())


def read_odt(path):
    with open(path, "rb") as f:
        blob = f.read()
    if blob[:4] != MAGIC:
        raise ValueError(f"{path}: bad magic {blob[:4]!r}, want {MAGIC!r}")
    tag = blob[4]
    if tag not in _DTYPE_FOR:
        raise ValueError(f"{path}: unknown dtype tag {tag}")
    dt = _DTYPE_FOR[tag]
    (rank,) = struct.unpack_from("<I", blob, 5)
    shape = struct.unpack_from(f"<{rank}I", blob, 9)
    off = 9 + 4 * rank
    n = int(np.prod(shape, dtype=np.int64)) if rank else 1
    want = off + n * dt.itemsize
    if len(blob) != want:
        raise ValueError(f"{path}: payload is {len(blob) - off} bytes, want {want - off}")
    arr = np.frombuffer(blob, dtype=dt, count=n, offset=off).reshape(shape)
    return arr.astype(dt.newbyteorder("="), copy=True)


def _to_bytes(img):
    return np.clip(np.round((np.asarray(img, dtype=np.float64) + 1.0) * 127.5), 0, 255).astype(np.uint8)


def write_ppm(path, img):
    """img: (3, H, W) or (H, W, 3) floats in [-1, 1]."""
    a = np.asarray(img)
    if a.ndim != 3:
        raise ValueError(f"PPM wants a 3-D image, got {a.shape}")
    if a.shape[0] == 3 and a.shape[-1] != 3:
        a = np.moveaxis(a, 0, -1)
    h, w, _ = a.shape
    with open(path, "wb") as f:
        f.write(f"P6\n{w} {h}\n255\n".encode())
        f.write(_to_bytes(a).tobytes())


def write_pgm(path, img):
    """img: (H, W) floats in [-1, 1] (or bools)."""
    a = np.asarray(img)
    if a.dtype == bool:
        a = a.astype(np.float64) * 2.0 - 1.0
    h, w = a.shape
    with open(path, "wb") as f:
        f.write(f"P5\n{w} {h}\n255\n".encode())
        f.write(_to_bytes(a).tobytes())


def read_ppm(path):
    """Back to (H, W, 3) floats in [-1, 1]."""
    with open(path, "rb") as f:
        blob = f.read()
    parts = blob.split(b"\n", 3)
    if parts[0] != b"P6":
        raise ValueError(f"{path}: not a binary PPM")
    w, h = map(int, parts[1].split())
    raw = np.frombuffer(parts[3], dtype=np.uint8, count=h * w * 3).reshape(h, w, 3)
    return raw.astype(np.float64) / 127.5 - 1.0
