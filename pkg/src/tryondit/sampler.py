"""Euler sampling of the learned velocity field, with classifier-free
guidance.

Integration runs on the uniform grid t_k = 1 - k/steps from pure noise
(t=1) down to data (t=0); the grid hits 0 exactly. Guidance mixes the
conditional and unconditional fields as

    v_g = v_uncond + g * (v_cond - v_uncond)

where the unconditional pass feeds the null text token and zeroed
condition images. g == 1 short-circuits to the conditional field alone,
so inert guidance is exact (and costs one pass, not two).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numerics as nx
from . import rng
from .model import NULL_TOKEN

STEPS_DEFAULT = 30
GUIDANCE_DEFAULT = 4.0


@dataclass
class Trajectory:
    times: list          # steps+1 floats, 1.0 down to 0.0
    states: list         # steps+1 arrays
    velocities: list     # steps entries (one per step taken)

    @property
    def x0(self):
        return self.states[-1]


def time_grid(steps):
    if steps < 1:
        raise ValueError(f"steps must be >= 1, got {steps}")
    return [1.0 - k / steps for k in range(steps + 1)]


def euler_integrate(v_fn, x1, steps, record=False):
    """Integrate dx/dt = v from t=1 to t=0. Returns x0, or a Trajectory."""
    grid = time_grid(steps)
    x = np.array(x1, copy=True)
    states = [x.copy()] if record else None
    vels = [] if record else None
    for k in range(steps):
        v = v_fn(x, grid[k])
        v = v.data if isinstance(v, nx.Tensor) else np.asarray(v)
        x = x + (grid[k + 1] - grid[k]) * v
        if not np.isfinite(x).all():
            raise nx.NonFiniteError(f"non-finite state at step {k} (t={grid[k]})")
        if record:
            states.append(x.copy())
            vels.append(v)
    if record:
        return Trajectory(grid, states, vels)
    return x


def guided_velocity_fn(model, conditions=(), text_ids=None, guidance=GUIDANCE_DEFAULT):
    """Velocity closure with classifier-free guidance baked in."""
    cond_fn = model.velocity_fn(conditions, text_ids)
    if guidance == 1.0:
        return cond_fn
    null_conditions = [np.zeros_like(np.asarray(c)) for c in conditions]
    null_ids = np.full(model.config.text_len, NULL_TOKEN, dtype=np.int64)
    uncond_fn = model.velocity_fn(null_conditions, null_ids)

    def v(x, t):
        v_c = cond_fn(x, t).data
        v_u = uncond_fn(x, t).data
        return v_u + guidance * (v_c - v_u)

    return v


def sample(model, conditions=(), text_ids=None, x1=None, steps=STEPS_DEFAULT,
           guidance=GUIDANCE_DEFAULT, seed=0, record=False):
    """Draw (or accept) x1 ~ N(0,1), integrate to x0, clamp to [-1, 1].

    Clamping happens only on the returned image; recorded trajectory
    states stay raw.
    """
    cfg = model.config
    if x1 is None:
        gen = rng.stream(seed, "sample-noise")
        x1 = gen.standard_normal((cfg.channels, cfg.image_size, cfg.image_size))
    x1 = np.asarray(x1, dtype=nx.DTYPES[cfg.dtype])
    v_fn = guided_velocity_fn(model, conditions, text_ids, guidance)
    out = euler_integrate(v_fn, x1, steps, record=record)
    if record:
        return np.clip(out.x0, -1.0, 1.0), out
    return np.clip(out, -1.0, 1.0)


def integrate_with_dt(v_fn, x1, dt_values):
    """Integrate the same x1 with several uniform step sizes.

    Every dt must be exactly 1/N for integer N (the grid has to land on 0).
    Returns {dt: raw x0_gen}.
    """
    out = {}
    for dt in dt_values:
        steps = round(1.0 / dt)
        if steps < 1 or steps * dt != 1.0:
            raise ValueError(f"dt must be 1/N for integer N, got {dt}")
        out[dt] = euler_integrate(v_fn, x1, steps)
    return out
