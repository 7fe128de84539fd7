"""Windowed-attention flow-matching DiT for procedural try-on, on a
self-contained numpy autodiff substrate."""

import os as _os

# Pin BLAS to one thread before numpy ever loads: reductions then run in a
# fixed order and reruns are bit-identical on the same machine.
for _var in ("OPENBLAS_NUM_THREADS", "OMP_NUM_THREADS", "MKL_NUM_THREADS",
             "NUMEXPR_NUM_THREADS", "VECLIB_MAXIMUM_THREADS"):
    _os.environ.setdefault(_var, "1")

__version__ = "0.1.0"

from . import numerics  # noqa: E402,F401
from .numerics import Tensor, Graph, backward  # noqa: E402,F401
