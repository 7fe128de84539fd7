"""Test-process setup.

The thread pins must land before numpy is imported anywhere in the test
process; pytest loads conftest before collecting test modules, so doing it
here at import time is early enough even when a test module imports numpy
before tryondit.
"""

import os

for _v in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS",
           "VECLIB_MAXIMUM_THREADS", "NUMEXPR_NUM_THREADS"):
    os.environ.setdefault(_v, "1")

import numpy as np
import pytest

import tryondit.numerics as nx


def agree(fd, an, rel_tol, tag=""):
    """Near zero a relative test is meaningless; fall back to absolute."""
    denom = max(abs(fd), abs(an))
    if denom < 1e-6:
        assert abs(fd - an) < 1e-8, f"{tag}: fd={fd:.3e} grad={an:.3e}"
    else:
        rel = abs(fd - an) / denom
        assert rel < rel_tol, f"{tag}: fd={fd:.6e} grad={an:.6e} rel={rel:.2e}"


def grad_check(build, arg_arrays, h=1e-5, rel_tol=1e-5, seed=0, sample=None):
    """Check reverse-mode gradients of build(*tensors) against central
    differences.

    build returns a Tensor of any shape; a fixed random weight contracts it
    to a scalar so every output coordinate sees a distinct upstream
    gradient. arg_arrays are coerced to float64. sample, if set, caps the
    number of coordinates probed per argument (chosen without replacement).
    """
    rng = np.random.default_rng(seed)
    args = [np.asarray(a, dtype=np.float64) for a in arg_arrays]
    tensors = [nx.Tensor(a.copy(), requires_grad=True) for a in args]
    with nx.Graph():
        out = build(*tensors)
        w = rng.standard_normal(out.shape)
        loss = nx.t_sum(nx.mul(out, nx.Tensor(w)))
        nx.backward(loss)
    grads = [t.grad.copy() for t in tensors]

    def value(arrs):
        out = build(*[nx.Tensor(a) for a in arrs])
        return float(np.sum(out.data * w))

    for i, base in enumerate(args):
        coords = np.arange(base.size)
        if sample is not None and base.size > sample:
            coords = rng.choice(base.size, size=sample, replace=False)
        for j in coords:
            plus = [a.copy() for a in args]
            minus = [a.copy() for a in args]
            plus[i].reshape(-1)[j] += h
            minus[i].reshape(-1)[j] -= h
            fd = (value(plus) - value(minus)) / (2.0 * h)
            agree(fd, float(grads[i].reshape(-1)[j]), rel_tol, f"arg{i}[{j}]")
    return grads


@pytest.fixture(scope="session")
def fd():
    return grad_check
