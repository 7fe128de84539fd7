"""Token sequence layout and 3-axis rotary position tables.

A sequence is [text tokens][noisy grid][reference grid 0][reference grid 1]...
Each token carries a position triple (axis_i, axis_w, axis_h):

    text tokens                  (0, 0, 0)
    noisy token at (w, h)        (0, w, h)
    reference i token at (w, h)  (i,
                                  w_noisy + sum_{j<i} w_ref_j + w * S_w,
                                  h_noisy + sum_{j<i} h_ref_j + h * S_h)

with per-reference scale factors S_w = w_noisy / w_ref_i and
S_h = h_noisy / h_ref_i, so a reference of any resolution spans the same
positional footprint as the noisy grid. Scaled positions are exact
rationals (fractions.Fraction); floats appear only when rotation angles
are evaluated.

Grids are (w, h) = (width, height); tokens enumerate row-major, h outer.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from fractions import Fraction

import numpy as np

ROPE_BASE = 10000.0


@dataclass(frozen=True)
class Position:
    axis_i: int
    axis_w: Fraction
    axis_h: Fraction

    def triple(self):
        return (self.axis_i, self.axis_w, self.axis_h)


@dataclass(frozen=True)
class Segment:
    kind: str          # "text" | "noisy" | "reference"
    start: int         # first token index in the sequence
    length: int
    grid: tuple | None = None   # (w, h) for image segments
    ordinal: int = 0            # reference number, 1-based; 0 otherwise

    @property
    def stop(self):
        return self.start + self.length


class TokenSequence:
    """Immutable layout of one model input sequence."""

    def __init__(self, segments, positions):
        self.segments = list(segments)
        self.positions = list(positions)
        self.total_len = len(self.positions)
        noisy = [s for s in self.segments if s.kind == "noisy"]
        if len(noisy) != 1:
            raise ValueError(f"need exactly one noisy segment, got {len(noisy)}")
        if sum(s.length for s in self.segments) != self.total_len:
            raise ValueError("segment lengths disagree with position count")

    def segment(self, kind, ordinal=0):
        for s in self.segments:
            if s.kind == kind and (kind != "reference" or s.ordinal == ordinal):
                return s
        raise KeyError(f"no segment {kind}/{ordinal}")

    @property
    def references(self):
        return [s for s in self.segments if s.kind == "reference"]

    def kind_of(self, idx):
        for s in self.segments:
            if s.start <= idx < s.stop:
                return s
        raise IndexError(idx)

    def to_json(self):
        def frac(f):
            return [f.numerator, f.denominator]

        return {
            "total_len": self.total_len,
            "segments": [
                {"kind": s.kind, "start": s.start, "length": s.length,
                 "grid": list(s.grid) if s.grid else None, "ordinal": s.ordinal}
                for s in self.segments
            ],
            "positions": [
                [p.axis_i, frac(Fraction(p.axis_w)), frac(Fraction(p.axis_h))]
                for p in self.positions
            ],
        }

    @classmethod
    def from_json(cls, obj):
        segments = [
            Segment(kind=s["kind"], start=s["start"], length=s["length"],
                    grid=tuple(s["grid"]) if s["grid"] else None,
                    ordinal=s["ordinal"])
            for s in obj["segments"]
        ]
        positions = [
            Position(i, Fraction(w[0], w[1]), Fraction(h[0], h[1]))
            for i, w, h in obj["positions"]
        ]
        return cls(segments, positions)

    def dump(self, path):
        with open(path, "w") as f:
            json.dump(self.to_json(), f, indent=1)

    @classmethod
    def load(cls, path):
        with open(path) as f:
            return cls.from_json(json.load(f))


def _grid_tokens(w, h):
    # h outer (rows), w inner: index = hh * w + ww
    for hh in range(h):
        for ww in range(w):
            yield ww, hh


def assign_positions(noisy_grid, ref_grids=(), text_count=0) -> TokenSequence:
    """Lay out [text][noisy][ref 1..n] and assign position triples."""
    wn, hn = noisy_grid
    if wn < 1 or hn < 1:
        raise ValueError(f"noisy grid must be positive, got {noisy_grid}")
    segments = []
    positions = []
    cursor = 0

    if text_count:
        segments.append(Segment("text", cursor, text_count))
        positions.extend(Position(0, Fraction(0), Fraction(0)) for _ in range(text_count))
        cursor += text_count

    segments.append(Segment("noisy", cursor, wn * hn, grid=(wn, hn)))
    for ww, hh in _grid_tokens(wn, hn):
        positions.append(Position(0, Fraction(ww), Fraction(hh)))
    cursor += wn * hn

    off_w, off_h = Fraction(wn), Fraction(hn)
    for i, (wr, hr) in enumerate(ref_grids, start=1):
        if wr < 1 or hr < 1:
            raise ValueError(f"reference {i} grid must be positive, got {(wr, hr)}")
        s_w = Fraction(wn, wr)
        s_h = Fraction(hn, hr)
        segments.append(Segment("reference", cursor, wr * hr, grid=(wr, hr), ordinal=i))
        for ww, hh in _grid_tokens(wr, hr):
            positions.append(Position(i, off_w + ww * s_w, off_h + hh * s_h))
        cursor += wr * hr
        off_w += wr
        off_h += hr

    return TokenSequence(segments, positions)


def axis_split(head_dim):
    """Split head_dim across the (index, w, h) axes, roughly (1/8, 7/16, 7/16),
    every part even. Tiny head dims may get a zero index part."""
    if head_dim % 2 or head_dim < 4:
        raise ValueError(f"head_dim must be even and >= 4, got {head_dim}")
    d_wh = max(2, 2 * int(7 * head_dim // 32))
    d_i = head_dim - 2 * d_wh
    if d_i < 0:
        raise ValueError(f"head_dim {head_dim} too small for the axis split")
    return (d_i, d_wh, d_wh)


def rope_frequencies(d_axis):
    """Geometric frequency ladder for one axis block of size d_axis."""
    if d_axis % 2:
        raise ValueError(f"axis sub-dim must be even, got {d_axis}")
    if d_axis == 0:
        return np.zeros(0, dtype=np.float64)
    f = np.arange(d_axis // 2, dtype=np.float64)
    return ROPE_BASE ** (-2.0 * f / d_axis)


def rope_tables(seq: TokenSequence, head_dim, split=None):
    """Per-token cos/sin rotation tables, shape (total_len, head_dim // 2).

    Channel pairs are laid out [i block | w block | h block]; the angle for
    pair f of axis a at position p is p * theta_f with the axis's own
    frequency ladder. Fractional positions evaluate directly.
    """
    if split is None:
        split = axis_split(head_dim)
    d_i, d_w, d_h = split
    if d_i + d_w + d_h != head_dim:
        raise ValueError(f"axis split {split} does not sum to head_dim {head_dim}")
    for d in split:
        if d % 2:
            raise ValueError(f"axis split parts must be even, got {split}")

    pos = np.array(
        [[float(p.axis_i), float(p.axis_w), float(p.axis_h)] for p in seq.positions],
        dtype=np.float64,
    )
    blocks = []
    for a, d_axis in enumerate(split):
        if d_axis == 0:
            continue
        blocks.append(pos[:, a:a + 1] * rope_frequencies(d_axis)[None, :])
    ang = np.concatenate(blocks, axis=1)
    return np.cos(ang), np.sin(ang)
