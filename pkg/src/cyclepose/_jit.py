"""Backend switch for the compiled kernels.

Set ``CYCLEPOSE_DISABLE_NUMBA=1`` to force the pure-numpy code path, e.g. on
platforms without numba or to cross-check results.
"""

import os

_DISABLED = os.environ.get("CYCLEPOSE_DISABLE_NUMBA", "").strip().lower() in ("1", "true", "yes", "on")

try:
    from numba import njit
    NUMBA_AVAILABLE = True
except ImportError:
    NUMBA_AVAILABLE = False

    def njit(*args, **kwargs):
        def decorator(func):
            return func
        if len(args) == 1 and callable(args[0]):
            return args[0]
        return decorator

USE_NUMBA = NUMBA_AVAILABLE and not _DISABLED
BACKEND = "numba" if USE_NUMBA else "numpy"
