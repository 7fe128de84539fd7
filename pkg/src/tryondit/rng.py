"""Splittable counter-based randomness.

Every consumer gets its own Philox stream keyed by (seed, *stream parts),
with the 128-bit key derived by hashing the parts. Streams never share
state, so drawing from one cannot perturb another, and any point in
training is reconstructible from (seed, step) alone.
"""

from __future__ import annotations

import hashlib

import numpy as np


def _key(seed, parts):
    h = hashlib.blake2b(digest_size=16)
    for part in (seed, *parts):
        h.update(str(part).encode())
        h.update(b"\x1f")
    return int.from_bytes(h.digest(), "little")


def stream(seed, *parts) -> np.random.Generator:
    """A fresh generator for the stream named by (seed, *parts)."""
    return np.random.Generator(np.random.Philox(key=_key(seed, parts)))


def truncated_normal(gen: np.random.Generator, shape, std=0.02, dtype=np.float32):
    """Normal(0, std) with draws beyond 2 std redrawn."""
    out = gen.normal(0.0, std, size=shape)
    bad = np.abs(out) > 2.0 * std
    while bad.any():
        out[bad] = gen.normal(0.0, std, size=int(bad.sum()))
        bad = np.abs(out) > 2.0 * std
    return out.astype(dtype)
