"""Numerical laboratory for perturbations of compressible Couette flow."""

import os as _os

# the TBB layer shipped with some numba wheels is too old; prefer OpenMP
_os.environ.setdefault("NUMBA_THREADING_LAYER", "omp")

__version__ = "0.1.0"
