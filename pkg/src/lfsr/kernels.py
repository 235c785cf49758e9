"""Backend selection for the hot kernels.

The compiled extension is used when it was built; otherwise, or when the
environment variable ``LFSR_KERNELS=python`` is set, the numpy fallback is
used. ``BACKEND`` names the active implementation.
"""

import os

from lfsr import _pykernels

if os.environ.get("LFSR_KERNELS", "").lower() == "python":
    _impl = _pykernels
    BACKEND = "python"
else:
    try:
        from lfsr import _ckernels as _impl
        BACKEND = "cython"
    except ImportError:
        _impl = _pykernels
        BACKEND = "python"

im2col = _impl.im2col
col2im = _impl.col2im
nlm = _impl.nlm

__all__ = ["BACKEND", "im2col", "col2im", "nlm"]
