"""Backend dispatch for the numeric hot kernels.

The environment variable KGNN_KERNELS picks the implementation:

    auto   (default) use the JIT backend if numba imports, else numpy
    numba  require the JIT backend
    numpy  force the pure-numpy fallback

Both backends implement the same four functions with identical
semantics; outputs agree to float64 rounding (different accumulation
orders). Within one backend results are bit-reproducible.
"""

import os

from ..errors import ConfigError

_choice = os.environ.get("KGNN_KERNELS", "auto").lower()
if _choice not in ("auto", "numba", "numpy"):
    raise ConfigError(f"KGNN_KERNELS must be auto, numba or numpy, got {_choice!r}")

if _choice == "numpy":
    from . import numpy_backend as _impl
else:
    try:
        from . import numba_backend as _impl
    except ImportError:
        if _choice == "numba":
            raise
        from . import numpy_backend as _impl

BACKEND = _impl.NAME
conv2d_forward = _impl.conv2d_forward
conv2d_backward = _impl.conv2d_backward
maxpool2_forward = _impl.maxpool2_forward
maxpool2_backward = _impl.maxpool2_backward

__all__ = [
    "BACKEND",
    "conv2d_forward",
    "conv2d_backward",
    "maxpool2_forward",
    "maxpool2_backward",
]
