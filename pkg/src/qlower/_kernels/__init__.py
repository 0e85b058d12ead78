"""Kernel backend selection.

Imports the compiled Cython kernels when available and falls back to
the numpy reference implementation otherwise. Set QLOWER_KERNELS=python
to force the fallback (the benchmark does this to compare the two).

Forward convolutions are bit-identical across backends by construction;
backward passes agree to FP32 rounding but carry no bit contract.
"""

import os

from . import pyref

if os.environ.get("QLOWER_KERNELS", "") == "python":
    _impl = pyref
else:
    try:
        from . import _convk as _impl
    except ImportError:
        _impl = pyref

BACKEND = _impl.BACKEND_NAME
conv_out_hw = _impl.conv_out_hw
conv2d_forward = _impl.conv2d_forward
conv2d_backward = _impl.conv2d_backward
conv2d_int = _impl.conv2d_int
