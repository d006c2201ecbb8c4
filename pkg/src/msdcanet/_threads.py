"""Thread-count pinning for reproducible numerics.

MSDCA_THREADS caps internal parallelism (the BLAS pools NumPy links
against); the default is 1, the serial-deterministic mode the tests rely
on. This only takes effect if msdcanet is imported before NumPy first
loads its BLAS, so the env vars are set with setdefault as early as
possible and never overwrite an explicit user choice.
"""

import os

_n = os.environ.get("MSDCA_THREADS", "1")
for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS",
             "NUMEXPR_NUM_THREADS", "VECLIB_MAXIMUM_THREADS"):
    os.environ.setdefault(_var, _n)
