"""Empirical probes of the learned field: Lipschitz estimates, rollout
smoothness, integration error versus step size, and the paired
single-step versus multi-timestep comparison.

The Lipschitz estimate is the max over sampled state pairs of

    ||v(x, t) - v(x', t')|| / (||x - x'|| + |t - t'|)

with the denominator floored. Pairs mix trajectory-adjacent states
(where a rollout actually lives) with random cross-time pairs, 1:1.
"""

from __future__ import annotations

import csv
import json
import os
from dataclasses import dataclass, field, replace

import numpy as np

from . import numerics as nx
from . import rng
from .objective import FlowSample, adjacent_velocity_gaps, draw_t, mtp_loss, \
    pointwise_bound_violations
from .sampler import euler_integrate, integrate_with_dt

DENOM_FLOOR = 1e-8


def _flat64(a):
    return np.asarray(a, dtype=np.float64).ravel()


def lipschitz_ratio(v_fn, state_a, state_b, floor=DENOM_FLOOR):
    """Difference quotient for one pair of (x, t) states."""
    (xa, ta), (xb, tb) = state_a, state_b
    va = v_fn(xa, ta)
    vb = v_fn(xb, tb)
    va = va.data if isinstance(va, nx.Tensor) else np.asarray(va)
    vb = vb.data if isinstance(vb, nx.Tensor) else np.asarray(vb)
    num = float(np.linalg.norm(_flat64(va) - _flat64(vb)))
    den = float(np.linalg.norm(_flat64(xa) - _flat64(xb))) + abs(float(ta) - float(tb))
    return num / max(den, floor)


@dataclass
class LipschitzReport:
    l_hat: float
    ratios: list
    n_pairs: int
    floor: float = DENOM_FLOOR


def estimate_lipschitz(v_fn, trajectories, n_pairs, seed=0,
                       floor=DENOM_FLOOR) -> LipschitzReport:
    """Max difference quotient over n_pairs pairs drawn from the given
    trajectories: half adjacent along a rollout, half random cross-time."""
    if not trajectories or n_pairs < 2:
        raise ValueError("need at least one trajectory and two pairs")
    states = [(i, k) for i, tr in enumerate(trajectories)
              for k in range(len(tr.states))]
    gen = rng.stream(seed, "lipschitz-pairs")
    ratios = []
    for p in range(n_pairs):
        if p % 2 == 0:
            # adjacent pair along one trajectory
            ti = int(gen.integers(len(trajectories)))
            tr = trajectories[ti]
            k = int(gen.integers(len(tr.states) - 1))
            a = (tr.states[k], tr.times[k])
            b = (tr.states[k + 1], tr.times[k + 1])
        else:
            ia = states[int(gen.integers(len(states)))]
            ib = states[int(gen.integers(len(states)))]
            if ia == ib:
                continue
            a = (trajectories[ia[0]].states[ia[1]], trajectories[ia[0]].times[ia[1]])
            b = (trajectories[ib[0]].states[ib[1]], trajectories[ib[0]].times[ib[1]])
        ratios.append(lipschitz_ratio(v_fn, a, b, floor))
    return LipschitzReport(float(max(ratios)), ratios, len(ratios), floor)


def probe_trajectories(model, items, steps=16, seed=0):
    """Record one conditional rollout per eval item (shared noise per index)."""
    out = []
    for idx, item in enumerate(items):
        gen = rng.stream(seed, "probe-noise", idx)
        x1 = gen.standard_normal(item.target.shape).astype(
            nx.DTYPES[model.config.dtype])
        v_fn = model.velocity_fn(item.conditions, item.text_ids)
        out.append(euler_integrate(v_fn, x1, steps, record=True))
    return out


def model_lipschitz(model, items, n_pairs=200, steps=16, seed=0) -> LipschitzReport:
    """Pool per-item estimates: each item's conditional field is probed over
    its own trajectory (pairs must be scored under a single field)."""
    trajs = probe_trajectories(model, items, steps=steps, seed=seed)
    reports = []
    for item, tr in zip(items, trajs):
        v_fn = model.velocity_fn(item.conditions, item.text_ids)
        reports.append(estimate_lipschitz(v_fn, [tr],
                                          max(2, n_pairs // len(items)), seed=seed))
    ratios = [r for rep in reports for r in rep.ratios]
    return LipschitzReport(float(max(ratios)), ratios, len(ratios))


# ---------------------------------------------------------------------------
# smoothness

@dataclass
class SmoothnessReport:
    k_steps: int
    dt: float
    n_chains: int
    r_mean: float            # E[sum_k ||v_{k+1} - v_k||^2]
    r_stderr: float
    l_mtp_mean: float
    l_ssp_mean: float        # mean k=0 term
    bound_violations: int
    no_adjacent_pairs: bool = False


def measure_smoothness(v_fn_factory, samples, k_steps=2, dt=0.03) -> SmoothnessReport:
    """Monte Carlo estimate of the rollout smoothness term.

    v_fn_factory(sample) -> v(x, t); samples are FlowSamples providing the
    chain anchors. K=1 chains have no adjacent pairs; flagged, not an error.
    """
    rs, mtps, ssps = [], [], []
    violations = 0
    for s in samples:
        chain = mtp_loss(v_fn_factory(s), s, k_steps, dt)
        rs.append(float(np.sum(adjacent_velocity_gaps(chain))))
        mtps.append(float(chain.loss.data))
        ssps.append(float(chain.per_step[0].data))
        violations += len(pointwise_bound_violations(chain, s.u))
    rs = np.array(rs)
    return SmoothnessReport(
        k_steps=k_steps, dt=dt, n_chains=len(samples),
        r_mean=float(rs.mean()),
        r_stderr=float(rs.std(ddof=1) / np.sqrt(len(rs))) if len(rs) > 1 else 0.0,
        l_mtp_mean=float(np.mean(mtps)),
        l_ssp_mean=float(np.mean(ssps)),
        bound_violations=violations,
        no_adjacent_pairs=(k_steps == 1),
    )


def chain_samples_for(items, k_steps, dt, n_chains, seed=0, dtype=np.float32):
    """FlowSample anchors for smoothness probes: eval items with fresh
    noise and valid t draws."""
    out = []
    gen_t = rng.stream(seed, "chain-t")
    for i in range(n_chains):
        item = items[i % len(items)]
        gen = rng.stream(seed, "chain-noise", i)
        x1 = gen.standard_normal(item.target.shape).astype(dtype)
        t = float(draw_t(gen_t, k_steps, dt))
        out.append(FlowSample(item.target.astype(dtype), x1, t,
                              item.conditions, item.text_ids, item.mask))
    return out


# ---------------------------------------------------------------------------
# integration error vs step size

@dataclass
class ErrorCurve:
    dts: list
    errors: list
    slope: float
    intercept: float
    exact: bool = False      # all errors below noise floor; slope undefined

    def rows(self):
        return list(zip(self.dts, self.errors))


def fit_loglog(dts, errors):
    lx = np.log(np.asarray(dts, dtype=np.float64))
    ly = np.log(np.asarray(errors, dtype=np.float64))
    slope, intercept = np.polyfit(lx, ly, 1)
    return float(slope), float(intercept)


def error_vs_dt(v_fn_factory, items, dt_values, seed=0, dtype=np.float32) -> ErrorCurve:
    """Mean endpoint error ||x0_gen(dt) - x0_true|| over the eval items,
    one shared noise draw per item across all dts."""
    dt_values = sorted(dt_values, reverse=True)
    if len(dt_values) < 4 or max(dt_values) / min(dt_values) < 8:
        raise ValueError("need >= 4 dt values spanning at least 8x")
    errs = {dt: [] for dt in dt_values}
    for idx, item in enumerate(items):
        gen = rng.stream(seed, "errdt-noise", idx)
        x1 = gen.standard_normal(item.target.shape).astype(dtype)
        outs = integrate_with_dt(v_fn_factory(item), x1, dt_values)
        for dt, x0g in outs.items():
            errs[dt].append(float(np.linalg.norm(
                _flat64(x0g) - _flat64(item.target))))
    errors = [float(np.mean(errs[dt])) for dt in dt_values]
    if max(errors) < 1e-10:
        # exact integration (linear oracle field); a log-log fit is meaningless
        return ErrorCurve(list(dt_values), errors, float("nan"), float("nan"),
                          exact=True)
    slope, intercept = fit_loglog(dt_values, errors)
    return ErrorCurve(list(dt_values), errors, slope, intercept)


def self_convergence(v_fn, x1, dt_values, dt_ref):
    """||x0_gen(dt) - x0_gen(dt_ref)|| per dt; the Richardson-style check."""
    ref = euler_integrate(v_fn, x1, round(1.0 / dt_ref))
    outs = integrate_with_dt(v_fn, x1, dt_values)
    return {dt: float(np.linalg.norm(_flat64(x) - _flat64(ref)))
            for dt, x in outs.items()}


# ---------------------------------------------------------------------------
# paired ssp vs mtp comparison

@dataclass
class CompareResult:
    rows: list = field(default_factory=list)   # per-seed dicts
    median_ssp: float = float("nan")
    median_mtp: float = float("nan")
    verdict: bool = False
    excluded_seeds: list = field(default_factory=list)


def compare_ssp_mtp(base_cfg, seeds, out_dir, eval_items, n_pairs=120,
                    probe_steps=16, quiet=True) -> CompareResult:
    """Train paired models per seed (identical except K: 1 vs 2), estimate
    the Lipschitz constant of each, compare medians. Diverged arms exclude
    the whole seed (flagged)."""
    from .trainer import load_checkpoint, train

    if len(seeds) < 3:
        raise ValueError(f"need >= 3 seeds for a median verdict, got {len(seeds)}")
    os.makedirs(out_dir, exist_ok=True)
    result = CompareResult()
    for seed in seeds:
        arms = {}
        aborted = False
        for label, k in (("ssp", 1), ("mtp", 2)):
            cfg = replace(base_cfg, seed=seed, k_steps=k)
            res = train(cfg, os.path.join(out_dir, f"seed{seed}_{label}"), quiet=quiet)
            if res.aborted:
                aborted = True
                break
            model, _, _, _ = load_checkpoint(res.checkpoint)
            rep = model_lipschitz(model, eval_items, n_pairs=n_pairs,
                                  steps=probe_steps, seed=seed)
            arms[label] = rep.l_hat
        if aborted:
            result.excluded_seeds.append(seed)
            continue
        result.rows.append({"seed": seed, "l_ssp": arms["ssp"], "l_mtp": arms["mtp"]})

    if result.rows:
        result.median_ssp = float(np.median([r["l_ssp"] for r in result.rows]))
        result.median_mtp = float(np.median([r["l_mtp"] for r in result.rows]))
        result.verdict = result.median_mtp < result.median_ssp

    with open(os.path.join(out_dir, "compare.csv"), "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["seed", "l_ssp", "l_mtp"])
        for r in result.rows:
            w.writerow([r["seed"], f"{r['l_ssp']:.8e}", f"{r['l_mtp']:.8e}"])
    with open(os.path.join(out_dir, "verdict.json"), "w") as f:
        json.dump({
            "median_l_ssp": result.median_ssp,
            "median_l_mtp": result.median_mtp,
            "mtp_smoother": result.verdict,
            "seeds": [r["seed"] for r in result.rows],
            "excluded_seeds": result.excluded_seeds,
        }, f, indent=1)
    _plot_compare(os.path.join(out_dir, "compare.svg"), result)
    return result


def _plot_compare(path, result: CompareResult):
    from .svgplot import line_plot
    series = {
        "ssp K=1": [(r["seed"], r["l_ssp"]) for r in result.rows],
        "mtp K=2": [(r["seed"], r["l_mtp"]) for r in result.rows],
    }
    line_plot(path, series, title="Lipschitz estimate per seed",
              xlabel="seed", ylabel="L_hat")
