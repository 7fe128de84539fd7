"""Sequence layout and rotary tables: position algebra, splits, round-trips."""

from fractions import Fraction

import numpy as np
import pytest

import tryondit.numerics as nx
from tryondit import layout


def ref_token(seq, ordinal, w, h):
    s = seq.segment("reference", ordinal)
    wr, hr = s.grid
    return seq.positions[s.start + h * wr + w].triple()


def test_frozen_positions_equal_grids():
    seq = layout.assign_positions((4, 4), [(4, 4)], text_count=1)
    assert seq.total_len == 1 + 16 + 16
    assert seq.positions[0].triple() == (0, 0, 0)
    noisy = seq.segment("noisy")
    assert seq.positions[noisy.start].triple() == (0, 0, 0)
    assert seq.positions[noisy.start + 4 * 1 + 2].triple() == (0, 2, 1)  # h outer
    assert ref_token(seq, 1, 0, 0) == (1, 4, 4)
    assert ref_token(seq, 1, 3, 3) == (1, 7, 7)


def test_frozen_positions_two_references():
    seq = layout.assign_positions((4, 4), [(4, 4), (4, 4)])
    assert ref_token(seq, 2, 0, 0) == (2, 8, 8)
    assert ref_token(seq, 2, 1, 0) == (2, 9, 8)


def test_frozen_positions_scaled_reference():
    seq = layout.assign_positions((4, 4), [(2, 2)])
    assert ref_token(seq, 1, 0, 0) == (1, 4, 4)
    assert ref_token(seq, 1, 1, 1) == (1, 6, 6)  # scale 4/2 = 2
    seq = layout.assign_positions((4, 4), [(8, 8)])
    p = ref_token(seq, 1, 1, 0)
    assert p == (1, Fraction(9, 2), 4)  # scale 1/2: fractional positions


def test_equal_grids_reduce_to_integer_offsets():
    # scale 1 must make every reference position an exact integer extension
    seq = layout.assign_positions((3, 5), [(3, 5), (3, 5)])
    for s in seq.references:
        for p in seq.positions[s.start:s.stop]:
            assert p.axis_w.denominator == 1 and p.axis_h.denominator == 1
    assert ref_token(seq, 1, 0, 0) == (1, 3, 5)
    assert ref_token(seq, 2, 0, 0) == (2, 6, 10)


def test_position_triples_unique_across_image_tokens():
    # text tokens all sit at (0, 0, 0) by design, so the uniqueness claim
    # is over the image tokens (noisy + references)
    rng = np.random.default_rng(0)
    for _ in range(1000):
        wn, hn = rng.integers(1, 9, size=2)
        n_refs = int(rng.integers(0, 4))
        refs = [tuple(int(x) for x in rng.integers(1, 9, size=2)) for _ in range(n_refs)]
        seq = layout.assign_positions((int(wn), int(hn)), refs,
                                      text_count=int(rng.integers(0, 3)))
        triples = [
            p.triple()
            for s in seq.segments if s.kind != "text"
            for p in seq.positions[s.start:s.stop]
        ]
        assert len(set(triples)) == len(triples)


def test_axis_split_table():
    assert layout.axis_split(4) == (0, 2, 2)
    assert layout.axis_split(6) == (2, 2, 2)
    assert layout.axis_split(8) == (4, 2, 2)
    assert layout.axis_split(16) == (4, 6, 6)
    assert layout.axis_split(32) == (4, 14, 14)
    for d in layout.axis_split(16):
        assert d % 2 == 0
    with pytest.raises(ValueError, match="even and >= 4"):
        layout.axis_split(5)
    with pytest.raises(ValueError, match="even and >= 4"):
        layout.axis_split(2)


def test_rope_frequency_ladder():
    f = layout.rope_frequencies(6)
    assert f[0] == 1.0
    assert np.allclose(f, [1.0, 10000.0 ** (-2 / 6), 10000.0 ** (-4 / 6)])
    assert layout.rope_frequencies(0).size == 0
    with pytest.raises(ValueError, match="even"):
        layout.rope_frequencies(3)


def test_rope_ladder_subset_stable():
    # doubling an axis block keeps every old frequency at the doubled index
    for d in (2, 4, 6, 8, 14):
        lo = layout.rope_frequencies(d)
        hi = layout.rope_frequencies(2 * d)
        assert np.array_equal(hi[0::2][: lo.size], lo)


def test_rope_identity_at_origin():
    seq = layout.assign_positions((2, 2), [], text_count=3)
    cos, sin = layout.rope_tables(seq, 8)
    assert cos.shape == (7, 4) and sin.shape == (7, 4)
    for i in range(3):  # text rows rotate by nothing
        assert np.array_equal(cos[i], np.ones(4))
        assert np.array_equal(sin[i], np.zeros(4))
    n0 = seq.segment("noisy").start  # noisy (0, 0) token likewise
    assert np.array_equal(cos[n0], np.ones(4))


def test_rope_relative_phase():
    # the rotated dot product depends only on the position difference
    seq = layout.assign_positions((8, 8))
    cos, sin = layout.rope_tables(seq, 16)
    rng = np.random.default_rng(1)
    q = rng.standard_normal(16)
    k = rng.standard_normal(16)

    def rotated_dot(iq, ik):
        rq = nx.rotate_pairs(nx.Tensor(q), cos[iq], sin[iq]).data
        rk = nx.rotate_pairs(nx.Tensor(k), cos[ik], sin[ik]).data
        return float(rq @ rk)

    def tok(w, h):
        return h * 8 + w

    base = rotated_dot(tok(1, 2), tok(3, 5))
    for dw, dh in ((2, 1), (4, 2), (0, 2)):
        shifted = rotated_dot(tok(1 + dw, 2 + dh), tok(3 + dw, 5 + dh))
        assert abs(shifted - base) < 1e-10


def test_rope_tables_split_validation():
    seq = layout.assign_positions((2, 2))
    with pytest.raises(ValueError, match="does not sum"):
        layout.rope_tables(seq, 8, split=(2, 2, 2))
    with pytest.raises(ValueError, match="even"):
        layout.rope_tables(seq, 8, split=(3, 3, 2))


def test_sequence_segment_lookup_and_kinds():
    seq = layout.assign_positions((2, 3), [(2, 2), (4, 2)], text_count=2)
    assert seq.segment("text").length == 2
    noisy = seq.segment("noisy")
    assert noisy.start == 2 and noisy.length == 6 and noisy.grid == (2, 3)
    r1 = seq.segment("reference", 1)
    r2 = seq.segment("reference", 2)
    assert (r1.start, r1.length, r1.ordinal) == (8, 4, 1)
    assert (r2.start, r2.length, r2.ordinal) == (12, 8, 2)
    assert seq.kind_of(0).kind == "text"
    assert seq.kind_of(9).ordinal == 1
    with pytest.raises(IndexError):
        seq.kind_of(seq.total_len)
    with pytest.raises(KeyError, match="no segment reference/3"):
        seq.segment("reference", 3)


def test_exactly_one_noisy_segment_required():
    with pytest.raises(ValueError, match="exactly one noisy"):
        layout.TokenSequence([], [])
    segs = [layout.Segment("noisy", 0, 1, (1, 1)), layout.Segment("noisy", 1, 1, (1, 1))]
    pos = [layout.Position(0, Fraction(0), Fraction(0))] * 2
    with pytest.raises(ValueError, match="got 2"):
        layout.TokenSequence(segs, pos)


def test_grid_validation():
    with pytest.raises(ValueError, match="noisy grid must be positive"):
        layout.assign_positions((0, 4))
    with pytest.raises(ValueError, match="reference 1 grid"):
        layout.assign_positions((4, 4), [(4, 0)])


def test_json_roundtrip(tmp_path):
    seq = layout.assign_positions((4, 4), [(2, 2), (8, 4)], text_count=3)
    back = layout.TokenSequence.from_json(seq.to_json())
    assert back.segments == seq.segments
    assert [p.triple() for p in back.positions] == [p.triple() for p in seq.positions]
    p = tmp_path / "layout.json"
    seq.dump(p)
    loaded = layout.TokenSequence.load(p)
    assert loaded.segments == seq.segments
    assert [p.triple() for p in loaded.positions] == [p.triple() for p in seq.positions]
