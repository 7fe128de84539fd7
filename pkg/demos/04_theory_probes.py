"""The three theory probes, run on fields with known answers: chain losses
and the pointwise smoothness bound, Euler's first-order convergence, and
Lipschitz estimation against closed forms.

Run from the repo root:  python3 demos/04_theory_probes.py
"""

from fractions import Fraction

import numpy as np

from tryondit import numerics as nx
from tryondit.analysis import (estimate_lipschitz, fit_loglog, lipschitz_ratio,
                               self_convergence)
from tryondit.objective import (FlowSample, adjacent_velocity_gaps, mtp_loss,
                                pointwise_bound_violations)
from tryondit.sampler import euler_integrate


def chain_probes():
    print("chain losses against the straight-path oracle")
    g = np.random.default_rng(0)
    s = FlowSample(x0=g.standard_normal(6), x1=g.standard_normal(6), t=0.7)
    oracle = lambda x, t: nx.Tensor(s.u)
    for k in (1, 2, 3):
        res = mtp_loss(oracle, s, k_steps=k, dt=0.05)
        print(f"  K={k}: loss {res.loss.item():.1f} "
              f"(exactly zero: {res.loss.item() == 0.0})")

    # the pointwise inequality ||dv||^2 <= 2||e_k+1||^2 + 2||e_k||^2 is an
    # algebraic identity in the chain quantities; count violations anyway
    bad = 0
    for seed in range(200):
        g = np.random.default_rng(seed)
        w = g.standard_normal((6, 6)) * 0.7
        field = lambda x, t: nx.Tensor(
            (np.tanh((x.data if isinstance(x, nx.Tensor) else np.asarray(x)) @ w)
             + t).astype(np.float64))
        s = FlowSample(x0=g.standard_normal(6), x1=g.standard_normal(6), t=0.8)
        chain = mtp_loss(field, s, k_steps=3, dt=0.1)
        bad += len(pointwise_bound_violations(chain, s.u))
    print(f"  bound violations over 200 random chains: {bad}")


def euler_probe():
    print("\nEuler order on dx/dt = x^2, x(1) = 1/2 (truth x(0) = 1/3)")
    truth = Fraction(1, 3)
    print(f"  {'steps':>5s} {'error':>12s} {'exact recursion':>16s}")
    errs, dts = [], []
    for n in (4, 8, 16):
        x = Fraction(1, 2)
        dt = Fraction(1, n)
        for _ in range(n):
            x = x - dt * x * x
        xf = 0.5
        for _ in range(n):
            xf = xf - (1.0 / n) * xf * xf
        err = abs(xf - float(truth))
        print(f"  {n:>5d} {err:>12.3e} {float(abs(x - truth)):>16.3e}")
        errs.append(err)
        dts.append(1.0 / n)
    slope, _ = fit_loglog(dts, errs)
    print(f"  log-log slope: {slope:.3f} (first order)")

    v = lambda x, t: -np.asarray(x) ** 2
    dists = self_convergence(v, np.full(1, 0.5), [1 / 4, 1 / 8, 1 / 16, 1 / 32], 1 / 256)
    pairs = sorted(dists.items(), reverse=True)
    print("  self-convergence vs dt=1/256 reference:",
          ", ".join(f"1/{round(1 / dt)}: {d:.2e}" for dt, d in pairs))


def lipschitz_probe():
    print("\nLipschitz estimates against closed forms")
    const = lambda x, t: np.ones(3)
    print(f"  constant field:      ratio {lipschitz_ratio(const, (np.zeros(3), 0.1), (np.ones(3), 0.9)):.3f} (want 0)")

    a = 2.5
    lin = lambda x, t: a * np.asarray(x)
    g = np.random.default_rng(1)
    trajs = [euler_integrate(lin, 10 * g.standard_normal(8), 8, record=True)
             for _ in range(3)]
    rep = estimate_lipschitz(lin, trajs, n_pairs=400)
    print(f"  v = {a}x:            L_hat {rep.l_hat:.4f} over {rep.n_pairs} pairs (want <= {a})")

    tfield = lambda x, t: np.array([t])
    r = lipschitz_ratio(tfield, (np.zeros(1), 0.2), (np.zeros(1), 0.9))
    print(f"  v = t, equal x:      ratio {r:.4f} (want 1)")


if __name__ == "__main__":
    chain_probes()
    euler_probe()
    lipschitz_probe()
