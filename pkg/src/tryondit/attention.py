"""Shifted-window attention over [text][noisy][reference...] sequences.

Windows tile each reference grid independently; they never span two
references and never include text or noisy tokens. Two parities exist:

    regular  window origins at multiples of M, the last row/column
             clipped at the grid boundary;
    shifted  origins offset by (M//2, M//2), the partial windows this
             creates at the borders kept as clipped windows.

Shifting is geometric clipping, not a cyclic roll: tokens near opposite
borders of a reference are never co-windowed.

Attention mask rules, in order:
  (a) text and noisy queries attend every token;
  (b) a reference query attends exactly its own window of its own grid;
  (c) a reference query never attends text or noisy keys;
  (d) every token attends itself (already implied by (a)/(b)).

The dense-mask kernel (attend) is the normative semantics; the
gather/scatter kernel (windowed_attend) computes the same thing without
materializing the N x N score matrix and is what the benchmark times.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from . import numerics as nx
from .layout import TokenSequence


@dataclass(frozen=True)
class Window:
    ordinal: int                 # which reference, 1-based
    w_range: tuple               # [start, stop) in grid w
    h_range: tuple               # [start, stop) in grid h
    token_ids: np.ndarray        # global sequence indices, ascending

    @property
    def size(self):
        return len(self.token_ids)


@dataclass
class WindowPlan:
    window_size: int
    parity: str                  # "regular" | "shifted"
    windows: list = field(default_factory=list)
    fingerprint: tuple = ()

    def windows_of(self, ordinal):
        return [w for w in self.windows if w.ordinal == ordinal]


def _cuts(extent, m, shift):
    """Interior cut positions for one axis: all 0 < x < extent with
    x == -shift (mod m)."""
    first = (-shift) % m
    if first == 0:
        first = m
    return list(range(first, extent, m))


def _intervals(extent, m, shift):
    edges = [0] + _cuts(extent, m, shift) + [extent]
    return list(zip(edges[:-1], edges[1:]))


def _seq_fingerprint(seq: TokenSequence):
    return (seq.total_len,
            tuple((s.kind, s.start, s.length, s.grid, s.ordinal) for s in seq.segments))


def plan_windows(seq: TokenSequence, window_size, parity) -> WindowPlan:
    """Tile every reference grid of seq with M x M windows of one parity."""
    if window_size < 1:
        raise ValueError(f"window size must be >= 1, got {window_size}")
    if parity not in ("regular", "shifted"):
        raise ValueError(f"parity must be regular or shifted, got {parity!r}")
    shift = window_size // 2 if parity == "shifted" else 0
    plan = WindowPlan(window_size, parity, fingerprint=_seq_fingerprint(seq))
    for seg in seq.references:
        w_ext, h_ext = seg.grid
        for h0, h1 in _intervals(h_ext, window_size, shift):
            for w0, w1 in _intervals(w_ext, window_size, shift):
                ids = np.array(
                    [seg.start + hh * w_ext + ww
                     for hh in range(h0, h1) for ww in range(w0, w1)],
                    dtype=np.int64,
                )
                plan.windows.append(Window(seg.ordinal, (w0, w1), (h0, h1), ids))
    _check_cover(seq, plan)
    return plan


def _check_cover(seq, plan):
    for seg in seq.references:
        seen = np.concatenate([w.token_ids for w in plan.windows_of(seg.ordinal)]) \
            if plan.windows_of(seg.ordinal) else np.zeros(0, dtype=np.int64)
        want = np.arange(seg.start, seg.stop, dtype=np.int64)
        if not np.array_equal(np.sort(seen), want):
            raise AssertionError(f"windows do not partition reference {seg.ordinal}")


def build_mask(seq: TokenSequence, plan: WindowPlan) -> np.ndarray:
    """Dense boolean (total_len, total_len) mask; True = may attend."""
    if plan.fingerprint != _seq_fingerprint(seq):
        raise ValueError("window plan was built for a different sequence")
    n = seq.total_len
    mask = np.zeros((n, n), dtype=bool)
    for seg in seq.segments:
        if seg.kind in ("text", "noisy"):
            mask[seg.start:seg.stop, :] = True
    for w in plan.windows:
        mask[np.ix_(w.token_ids, w.token_ids)] = True
    return mask


def attend(q, k, v, mask, rope=None):
    """Masked multi-head attention via the dense mask.

    q, k, v: Tensors shaped (..., heads, N, head_dim); mask: (N, N) bool.
    rope: optional (cos, sin) tables of shape (N, head_dim // 2), applied to
    q and k (never v) before the dot product.
    """
    head_dim = q.shape[-1]
    if rope is not None:
        cos, sin = rope
        q = nx.rotate_pairs(q, cos, sin)
        k = nx.rotate_pairs(k, cos, sin)
    # fold the temperature into q: cheaper than scaling the score matrix
    q = nx.scale(q, 1.0 / np.sqrt(head_dim))
    kt = nx.transpose(k, tuple(range(k.ndim - 2)) + (k.ndim - 1, k.ndim - 2))
    probs = nx.softmax(nx.matmul(q, kt), mask)
    return nx.matmul(probs, v)


def _np_softmax(scores):
    mx = scores.max(axis=-1, keepdims=True)
    e = np.exp(scores - mx)
    return e / e.sum(axis=-1, keepdims=True)


def _np_rotate(x, cos, sin):
    out = np.empty_like(x)
    xe, xo = x[..., 0::2], x[..., 1::2]
    out[..., 0::2] = xe * cos - xo * sin
    out[..., 1::2] = xe * sin + xo * cos
    return out


def windowed_attend(q, k, v, seq: TokenSequence, plan: WindowPlan, rope=None):
    """Same semantics as attend(..., build_mask(seq, plan)) without the dense
    score matrix: global attention for text/noisy queries, per-window
    gather/scatter for reference queries. Plain numpy, forward only."""
    q, k, v = (x.data if isinstance(x, nx.Tensor) else np.asarray(x) for x in (q, k, v))
    if rope is not None:
        cos, sin = rope
        q = _np_rotate(q, cos, sin)
        k = _np_rotate(k, cos, sin)
    head_dim = q.shape[-1]
    # same op order as attend(): temperature folded into q before the matmul
    q = q * (1.0 / np.sqrt(head_dim))
    out = np.empty_like(q)

    dq = np.concatenate(
        [np.arange(s.start, s.stop) for s in seq.segments if s.kind in ("text", "noisy")]
    )
    probs = _np_softmax(np.matmul(q[..., dq, :], np.swapaxes(k, -1, -2)))
    out[..., dq, :] = np.matmul(probs, v)

    # group equal-sized windows so exact tilings run as one batched matmul
    by_size = {}
    for w in plan.windows:
        by_size.setdefault(w.size, []).append(w.token_ids)
    for ids_list in by_size.values():
        ids = np.stack(ids_list)                       # (G, S)
        qg = _gather(q, ids)
        kg = _gather(k, ids)
        vg = _gather(v, ids)
        pg = _np_softmax(np.matmul(qg, np.swapaxes(kg, -1, -2)))
        og = np.matmul(pg, vg)
        _scatter(out, ids, og)
    return out


def _gather(x, ids):
    # x: (..., N, D), ids: (G, S) -> (..., G, S, D)
    g = x[..., ids, :]
    return g


def _scatter(out, ids, vals):
    # vals: (..., G, S, D) back into out (..., N, D)
    out[..., ids.reshape(-1), :] = vals.reshape(vals.shape[:-3] + (-1, vals.shape[-1]))


@dataclass(frozen=True)
class FlopReport:
    """Analytic multiply-add based FLOP counts for one attention layer.
    Each matmul of shapes (m, d) x (d, n) counts 2*m*n*d; scores and value
    aggregation both count, per head."""
    denoise_global: int
    condition_windowed: int

    @property
    def total(self):
        return self.denoise_global + self.condition_windowed


def flops(seq: TokenSequence, plan: WindowPlan, heads, head_dim) -> FlopReport:
    n = seq.total_len
    n_denoise = sum(s.length for s in seq.segments if s.kind in ("text", "noisy"))
    denoise = 4 * n_denoise * n * head_dim * heads
    cond = sum(4 * w.size * w.size * head_dim * heads for w in plan.windows)
    return FlopReport(denoise, cond)


def full_condition_flops(seq: TokenSequence, heads, head_dim):
    """Condition cost if every reference were one global window."""
    return sum(4 * s.length * s.length * head_dim * heads for s in seq.references)


def bench_attention(ref_side, window_size, heads=4, head_dim=16, repeats=3, seed=0,
                    dtype=np.float32):
    """Time windowed vs full attention over one ref_side^2-token reference.

    Returns a dict row: analytic condition FLOPs for both plans plus
    best-of-repeats wall times in ns."""
    from . import rng
    from .layout import assign_positions

    seq = assign_positions((1, 1), [(ref_side, ref_side)])
    plan = plan_windows(seq, window_size, "regular")
    full_plan = plan_windows(seq, ref_side, "regular")

    gen = rng.stream(seed, "bench")
    shape = (heads, seq.total_len, head_dim)
    q = gen.standard_normal(shape).astype(dtype)
    k = gen.standard_normal(shape).astype(dtype)
    v = gen.standard_normal(shape).astype(dtype)

    def run(p):
        best = None
        for _ in range(repeats):
            t0 = time.perf_counter_ns()
            windowed_attend(q, k, v, seq, p)
            dt = time.perf_counter_ns() - t0
            best = dt if best is None else min(best, dt)
        return best

    return {
        "ref_tokens": ref_side * ref_side,
        "window": window_size,
        "flops_windowed": flops(seq, plan, heads, head_dim).condition_windowed,
        "flops_full": flops(seq, full_plan, heads, head_dim).condition_windowed,
        "time_windowed_ns": run(plan),
        "time_full_ns": run(full_plan),
    }
