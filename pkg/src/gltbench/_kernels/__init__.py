"""Backend dispatch for the numeric hot kernels.

The default backend is numba (JIT-compiled, cached on disk). Set
``GLT_BACKEND=numpy`` to force the pure-numpy fallback, or
``GLT_BACKEND=numba`` to fail loudly when numba is unavailable.
``benchmarks/bench_kernels.py`` compares the two.
"""

import os

_requested = os.environ.get("GLT_BACKEND", "").strip().lower()
if _requested not in ("", "numba", "numpy"):
    raise RuntimeError(f"GLT_BACKEND must be 'numba' or 'numpy', got {_requested!r}")

if _requested == "numpy":
    from . import numpy_impl as _impl
    BACKEND = "numpy"
else:
    try:
        from . import numba_impl as _impl
        BACKEND = "numba"
    except ImportError:
        if _requested == "numba":
            raise
        from . import numpy_impl as _impl
        BACKEND = "numpy"

ACT_RELU = _impl.ACT_RELU
ACT_TANH = _impl.ACT_TANH
mlp1_forward = _impl.mlp1_forward
softmax_rows = _impl.softmax_rows
fused_train_step = _impl.fused_train_step
lloyd = _impl.lloyd
gbl_scan = _impl.gbl_scan
