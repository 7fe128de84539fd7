"""Training objectives for the velocity field.

The interpolation path is x_t = (1 - t) * x0 + t * x1 with x0 clean data
and x1 unit Gaussian noise, so the regression target is the constant
displacement u = x1 - x0 at every t.

Single-step prediction (ssp) supervises v(x_t, t) against u once.
Multi-timestep prediction (mtp) additionally rolls the model's own Euler
updates toward t=0 and supervises each visited state against the same u:

    t_k = t - k * dt,   x_{t_{k+1}} = x_{t_k} - dt * v(x_{t_k}, t_k)

    loss = (1/K) * sum_k mean( (v(x_{t_k}, t_k) - u)^2 )

mtp with K=1 is ssp, bit for bit (same code path). Gradients flow through
the rolled states unless detach_chain is set.

The alignment term compares a frozen feature embedding of the masked
region of the one-step clean estimate against the ground truth:
1 - cos(E(mask * gt), E(mask * gen)).
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from . import numerics as nx
from . import rng

LAMBDA_ALIGN = 0.10
MTP_K = 2
MTP_DT = 0.03  # 30 scheduler ticks on the 0..1000 grid, in unit time


@dataclass
class FlowSample:
    """One (or one batch of) supervised flow matching example(s).

    Arrays may carry a leading batch axis; t is then a vector. x_t and u
    are derived once at construction and frozen.
    """
    x0: np.ndarray
    x1: np.ndarray
    t: float | np.ndarray
    conditions: list = field(default_factory=list)
    text_ids: np.ndarray | None = None
    mask: np.ndarray | None = None
    x_t: np.ndarray = None
    u: np.ndarray = None

    def __post_init__(self):
        self.x0 = np.asarray(self.x0)
        self.x1 = np.asarray(self.x1)
        if self.x0.shape != self.x1.shape:
            raise nx.ShapeError(f"x0 {self.x0.shape} vs x1 {self.x1.shape}")
        self.x_t = interpolate(self.x0, self.x1, self.t)
        self.u = self.x1 - self.x0

    @property
    def batched(self):
        return np.ndim(self.t) > 0


def _t_weights(t, like):
    t = np.asarray(t, dtype=like.dtype)
    if t.ndim == 0:
        return t
    return t.reshape((-1,) + (1,) * (like.ndim - 1))


def interpolate(x0, x1, t):
    """Linear path point x_t = (1 - t) x0 + t x1; t must lie in [0, 1]."""
    tv = np.asarray(t, dtype=np.float64)
    if (tv < 0).any() or (tv > 1).any():
        raise ValueError(f"t must lie in [0, 1], got {t}")
    w = _t_weights(t, np.asarray(x0))
    return (1.0 - w) * np.asarray(x0) + w * np.asarray(x1)


@dataclass
class ChainResult:
    loss: nx.Tensor                 # scalar, the (1/K)-averaged objective
    per_step: list                  # K scalar Tensors, mean sq error at each t_k
    velocities: list                # K velocity Tensors v(x_{t_k}, t_k)
    states: list                    # K state Tensors/arrays x_{t_k}
    times: list                     # K floats (or vectors) t_k


def _chain(v_fn, sample: FlowSample, k_steps, dt, detach_chain=False) -> ChainResult:
    if k_steps < 1:
        raise ValueError(f"K must be >= 1, got {k_steps}")
    t0 = np.asarray(sample.t, dtype=np.float64)
    t_last = t0 - (k_steps - 1) * dt
    if (t_last < 0).any():
        raise ValueError(
            f"t underflow: t={sample.t} cannot support K={k_steps} steps of dt={dt}; "
            f"resample t >= {(k_steps - 1) * dt}")

    u = nx.Tensor(sample.u.astype(sample.x_t.dtype))
    x = nx.Tensor(sample.x_t)
    per_step, velocities, states, times = [], [], [], []
    terms = None
    t_k = sample.t
    for k in range(k_steps):
        v = v_fn(x, t_k)
        err = nx.t_mean(nx.square(nx.sub(v, u)))
        per_step.append(err)
        velocities.append(v)
        states.append(x)
        times.append(t_k)
        terms = err if terms is None else nx.add(terms, err)
        if k + 1 < k_steps:
            step_v = nx.Tensor(v.data) if detach_chain else v
            x = nx.sub(x, nx.scale(step_v, dt))
            t_k = t_k - dt
    loss = nx.scale(terms, 1.0 / k_steps)
    return ChainResult(loss, per_step, velocities, states, times)


def ssp_loss(v_fn, sample: FlowSample) -> ChainResult:
    """Single-step flow matching loss (the K=1 chain)."""
    return _chain(v_fn, sample, 1, 0.0)


def mtp_loss(v_fn, sample: FlowSample, k_steps=MTP_K, dt=MTP_DT,
             detach_chain=False) -> ChainResult:
    """Multi-timestep prediction loss over a K-state Euler chain."""
    return _chain(v_fn, sample, k_steps, dt, detach_chain)


def draw_t(gen: np.random.Generator, k_steps=MTP_K, dt=MTP_DT, size=None):
    """Uniform t over the sub-interval where the K-chain stays in [0, 1]."""
    lo = (k_steps - 1) * dt
    if lo >= 1.0:
        raise ValueError(f"no valid t: (K-1)*dt = {lo} >= 1")
    return lo + (1.0 - lo) * gen.uniform(size=size)


# ---------------------------------------------------------------------------
# alignment

class IdentityExtractor:
    """Features = the masked pixels themselves."""

    def __call__(self, flat):
        return flat


class OrthogonalExtractor:
    """Frozen random rotation of the flattened masked image. Orthogonal maps
    preserve inner products, so feature cosine == pixel cosine; the point is
    the interface, not the geometry."""

    def __init__(self, dim, seed=0, dtype="f32"):
        gen = rng.stream(seed, "extractor")
        a = gen.standard_normal((dim, dim))
        q, r = np.linalg.qr(a)
        q = q * np.sign(np.diag(r))[None, :]
        self.matrix = q.astype(nx.DTYPES[dtype])

    def __call__(self, flat):
        row = nx.reshape(flat, (1, flat.size))
        return nx.reshape(nx.matmul(row, nx.Tensor(self.matrix)), (self.matrix.shape[1],))


def align_loss(generated, ground_truth, mask, extractor=None):
    """1 - cos(E(mask * gt), E(mask * gen)); 0 with a warning on empty mask."""
    if extractor is None:
        extractor = IdentityExtractor()
    gen_t = generated if isinstance(generated, nx.Tensor) else nx.Tensor(generated)
    gt = np.asarray(ground_truth, dtype=gen_t.dtype)
    m = np.asarray(mask)
    if m.dtype != bool:
        m = m > 0.5
    if m.shape != gt.shape[-2:]:
        raise nx.ShapeError(f"mask {m.shape} vs image {gt.shape}")
    if not m.any():
        warnings.warn("align_loss: empty mask, contributing 0")
        return nx.Tensor(np.asarray(0.0, dtype=gen_t.dtype))
    m_full = np.broadcast_to(m, gt.shape).astype(gen_t.dtype)
    masked_gen = nx.mul(gen_t, nx.Tensor(m_full))
    f_gen = extractor(nx.reshape(masked_gen, (masked_gen.size,)))
    f_gt = extractor(nx.Tensor((gt * m_full).reshape(-1)))
    cos = nx.cosine_similarity(f_gt, f_gen)
    return nx.sub(nx.Tensor(np.asarray(1.0, dtype=gen_t.dtype)), cos)


# ---------------------------------------------------------------------------
# combined objective

@dataclass
class LossBreakdown:
    l_ssp_equiv: float          # the k=0 chain term
    l_mtp: float
    l_align: float
    lam: float
    per_step: list
    total: float = None

    def __post_init__(self):
        if self.total is None:
            # float64 identity: total == l_mtp + lam * l_align
            self.total = self.l_mtp + self.lam * self.l_align


def total_loss(v_fn, sample: FlowSample, k_steps=MTP_K, dt=MTP_DT,
               lam=LAMBDA_ALIGN, extractor=None, detach_chain=False):
    """mtp + lam * align. Align uses the one-step clean estimate
    x0_hat = x_t - t * v(x_t, t) and applies only where a garment mask
    exists (lam = 0 skips the generation entirely)."""
    chain = _chain(v_fn, sample, k_steps, dt, detach_chain)
    l_align = None
    if lam != 0.0 and sample.mask is not None:
        v0 = chain.velocities[0]
        x_t = nx.Tensor(sample.x_t)
        w = _t_weights(sample.t, sample.x_t).astype(sample.x_t.dtype)
        x0_hat = nx.sub(x_t, nx.mul(nx.Tensor(np.broadcast_to(w, sample.x_t.shape).copy()), v0))
        if sample.batched:
            parts = []
            for b in range(sample.x0.shape[0]):
                parts.append(align_loss(_batch_item(x0_hat, b), sample.x0[b],
                                        sample.mask[b], extractor))
            acc = parts[0]
            for p in parts[1:]:
                acc = nx.add(acc, p)
            l_align = nx.scale(acc, 1.0 / len(parts))
        else:
            l_align = align_loss(x0_hat, sample.x0, sample.mask, extractor)

    if l_align is None:
        loss = chain.loss
        l_align_val = 0.0
    else:
        loss = nx.add(chain.loss, nx.scale(l_align, lam))
        l_align_val = float(l_align.data)

    breakdown = LossBreakdown(
        l_ssp_equiv=float(chain.per_step[0].data),
        l_mtp=float(chain.loss.data),
        l_align=l_align_val,
        lam=lam,
        per_step=[float(p.data) for p in chain.per_step],
    )
    return loss, breakdown, chain


def _batch_item(t, b):
    return nx.reshape(nx.narrow(t, 0, b, 1), t.shape[1:])


# ---------------------------------------------------------------------------
# smoothness bound bookkeeping

def adjacent_velocity_gaps(chain: ChainResult):
    """Squared distances ||v_{k+1} - v_k||^2 along one chain, float64."""
    vs = [np.asarray(v.data, dtype=np.float64) for v in chain.velocities]
    return [float(((b - a) ** 2).sum()) for a, b in zip(vs, vs[1:])]


def pointwise_bound_violations(chain: ChainResult, u):
    """Check ||v_{k+1} - v_k||^2 <= 2||eps_{k+1}||^2 + 2||eps_k||^2 pointwise.

    Exact algebra: the slack is ||eps_{k+1} + eps_k||^2 >= 0. Returns the
    list of (k, lhs, rhs) violations; empty means the bound held everywhere.
    """
    u64 = np.asarray(u, dtype=np.float64)
    vs = [np.asarray(v.data, dtype=np.float64) for v in chain.velocities]
    eps = [((v - u64) ** 2).sum() for v in vs]
    out = []
    for k in range(len(vs) - 1):
        lhs = float(((vs[k + 1] - vs[k]) ** 2).sum())
        rhs = float(2.0 * eps[k + 1] + 2.0 * eps[k])
        if lhs > rhs:
            out.append((k, lhs, rhs))
    return out
