"""Backend selection for the hot evaluation kernels.

The compiled extension (`natopt._fastcore`) is preferred; the pure-numpy
fallback in `_forward_py` is used when the extension is not built or when
NATOPT_PURE_PY=1 is set.  Both compute the same quantities; per-row outputs
agree to floating-point rounding.  `benchmarks/bench_kernels.py` compares
their throughput.
"""

from __future__ import annotations

import os

from . import _forward_py

_FORCED_PY = os.environ.get("NATOPT_PURE_PY", "") not in ("", "0")

if not _FORCED_PY:
    try:
        from . import _fastcore as _impl

        _BACKEND = "compiled"
    except ImportError:
        _impl = _forward_py
        _BACKEND = "python"
else:
    _impl = _forward_py
    _BACKEND = "python"

rows_forward = _impl.rows_forward
dedup_rows = _impl.dedup_rows


def backend_name() -> str:
    return _BACKEND
