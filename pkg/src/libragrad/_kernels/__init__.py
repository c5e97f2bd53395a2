"""Hot loops with a compiled implementation and a pure-Python fallback.

The compiled module is used when it was built; set ``LIBRAGRAD_PURE_PYTHON=1``
to force the fallback.
"""

import os

from . import _pykernels as python

try:
    if os.environ.get("LIBRAGRAD_PURE_PYTHON", "") not in ("", "0"):
        raise ImportError("pure-python kernels requested")
    from . import _ckernels as compiled
except ImportError:
    compiled = None

_impl = compiled if compiled is not None else python
BACKEND = "cython" if compiled is not None else "python"

xoshiro_next_u64 = _impl.xoshiro_next_u64
xoshiro_uniform_fill = _impl.xoshiro_uniform_fill
xoshiro_normal_fill = _impl.xoshiro_normal_fill
bicubic_upsample = _impl.bicubic_upsample
ordering_aucs = _impl.ordering_aucs

__all__ = [
    "BACKEND",
    "python",
    "compiled",
    "xoshiro_next_u64",
    "xoshiro_uniform_fill",
    "xoshiro_normal_fill",
    "bicubic_upsample",
    "ordering_aucs",
]
