"""qlower: hardware-aware uniform quantization over a small graph IR.

Calibrates, inserts, folds, and lowers quantizers; simulates FP32
fake-quantized inference and integer-only execution; trains quantizer
parameters at toy scale.
"""

__version__ = "0.1.0"

from ._kernels import BACKEND as kernel_backend  # noqa: F401
