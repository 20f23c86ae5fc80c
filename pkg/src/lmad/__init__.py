"""Point cloud affordance detection driven by a small language-model stack.

Importing the package pins the BLAS thread pools to LMAD_THREADS (default 1)
so that repeated runs on the same machine are bit-for-bit reproducible.  The
variables are only set if the user has not already chosen values.
"""

import os as _os

_workers = _os.environ.get("LMAD_THREADS", "1")
for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
    _os.environ.setdefault(_var, _workers)

__version__ = "0.1.0"
