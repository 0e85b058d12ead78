"""Uniform affine quantization: schemes, resolved parameters, backend presets.

The core mapping is

    q   = clip(round_half_to_even(x / s) + z, qmin, qmax)
    x^  = s * (q - z)

with a per-tensor or per-channel scale ``s`` and integer zero-point ``z``.
Symmetric schemes pin ``z = 0``; power-of-two scale forms additionally
require ``log2(s)`` to be an exact integer.
"""

import math
from dataclasses import dataclass, replace

import numpy as np

from .errors import NumericError
from .tensor import F32, I8RANGE, Tensor

SYMMETRIC = "symmetric"
ASYMMETRIC = "asymmetric"
PER_TENSOR = "per_tensor"
PER_CHANNEL = "per_channel"
FP32_SCALE = "fp32"
POT_SCALE = "pot"
SIGNED = "signed"
UNSIGNED = "unsigned"
ADAPTIVE = "adaptive"

SCALE_FLOOR = 1e-8


@dataclass(frozen=True)
class QScheme:
    """How a tensor is to be quantized (before ranges are known)."""

    bitwidth: int = 8
    symmetry: str = SYMMETRIC
    granularity: str = PER_TENSOR
    axis: int = 0
    scale_form: str = FP32_SCALE
    signedness: str = SIGNED

    def __post_init__(self):
        if not 2 <= self.bitwidth <= 8:
            raise ValueError(f"bitwidth must be in 2..8, got {self.bitwidth}")
        if self.symmetry not in (SYMMETRIC, ASYMMETRIC):
            raise ValueError(f"unknown symmetry {self.symmetry!r}")
        if self.granularity not in (PER_TENSOR, PER_CHANNEL):
            raise ValueError(f"unknown granularity {self.granularity!r}")
        if self.scale_form not in (FP32_SCALE, POT_SCALE):
            raise ValueError(f"unknown scale_form {self.scale_form!r}")
        if self.signedness not in (SIGNED, UNSIGNED, ADAPTIVE):
            raise ValueError(f"unknown signedness {self.signedness!r}")

    def with_bits(self, t):
        return replace(self, bitwidth=t)


@dataclass(frozen=True)
class QParams:
    """Resolved quantization parameters for one tensor."""

    scales: tuple
    zero_points: tuple
    qmin: int
    qmax: int
    scale_form: str = FP32_SCALE

    def __post_init__(self):
        object.__setattr__(self, "scales", tuple(float(s) for s in self.scales))
        object.__setattr__(
            self, "zero_points", tuple(int(z) for z in self.zero_points))
        if len(self.scales) != len(self.zero_points):
            raise ValueError("scales and zero_points must have equal length")
        if not self.scales:
            raise ValueError("scales must be non-empty")
        if self.qmin >= self.qmax:
            raise ValueError(f"qmin {self.qmin} must be < qmax {self.qmax}")
        for s in self.scales:
            if not (s > 0) or not math.isfinite(s):
                raise ValueError(f"scales must be positive and finite, got {s}")
            if self.scale_form == POT_SCALE and math.log2(s) != round(math.log2(s)):
                raise ValueError(f"POT scale {s} is not a power of two")
        for z in self.zero_points:
            if not self.qmin <= z <= self.qmax:
                raise ValueError(
                    f"zero_point {z} outside [{self.qmin}, {self.qmax}]")

    @property
    def num_channels(self):
        return len(self.scales)

    def channel(self, c):
        """Per-tensor view of channel ``c`` (for slice-wise checks)."""
        return QParams((self.scales[c],), (self.zero_points[c],),
                       self.qmin, self.qmax, self.scale_form)


@dataclass(frozen=True)
class BackendPreset:
    name: str
    weight: QScheme
    activation: QScheme
    graph_policy: str
    fold_bn: bool


def resolve_range(scheme, data_min=0.0):
    """Integer range for a scheme; adaptive signedness keys off data_min."""
    t = scheme.bitwidth
    sign = scheme.signedness
    if sign == ADAPTIVE:
        sign = UNSIGNED if data_min >= 0 else SIGNED
    if sign == SIGNED:
        return -(2 ** (t - 1)), 2 ** (t - 1) - 1
    return 0, 2 ** t - 1


def _broadcast(vals, ndim, axis):
    shape = [1] * ndim
    shape[axis] = -1
    return np.asarray(vals, dtype=np.float64).reshape(shape)


def _check_channels(qp, x, axis):
    if qp.num_channels != x.shape[axis]:
        raise ValueError(
            f"per-channel params carry {qp.num_channels} channels but axis "
            f"{axis} has extent {x.shape[axis]}")


def quantize(x, qp, axis=None):
    """F32 tensor -> integer levels in [qmin, qmax] (round half to even)."""
    if x.dtype != F32:
        raise ValueError(f"quantize expects an F32 tensor, got {x.dtype}")
    xd = x.data.astype(np.float64)
    if not np.isfinite(xd).all():
        raise NumericError("quantize input contains non-finite values")
    if axis is None:
        s, z = qp.scales[0], qp.zero_points[0]
    else:
        _check_channels(qp, x, axis)
        s = _broadcast(qp.scales, x.ndim, axis)
        z = _broadcast(qp.zero_points, x.ndim, axis)
    q = np.clip(np.rint(xd / s) + z, qp.qmin, qp.qmax)
    return Tensor(q.astype(np.int64), I8RANGE)


def dequantize(q, qp, axis=None):
    """Integer levels -> F32 values s * (q - z)."""
    if q.dtype == F32:
        raise ValueError("dequantize expects an integer tensor")
    qd = q.data
    if qd.min() < qp.qmin or qd.max() > qp.qmax:
        raise ValueError(
            f"quantized values outside [{qp.qmin}, {qp.qmax}]")
    if axis is None:
        diff = (qd - qp.zero_points[0]).astype(np.float32)
        out = diff * np.float32(qp.scales[0])
    else:
        _check_channels(qp, q, axis)
        z = _broadcast(qp.zero_points, qd.ndim, axis)
        s = _broadcast(qp.scales, qd.ndim, axis).astype(np.float32)
        out = (qd - z).astype(np.float32) * s
    return Tensor(out, F32)


def fake_quantize(x, qp, axis=None):
    """Round-trip x through the integer grid, staying in F32."""
    return dequantize(quantize(x, qp, axis), qp, axis)


def snap_pot(scale):
    """Nearest power of two; exact half-way exponents snap to the larger."""
    if not scale > 0:
        raise ValueError(f"snap_pot requires a positive scale, got {scale}")
    e = math.log2(scale)
    lo = math.floor(e)
    # ties go up: a larger scale widens the covered range instead of clipping
    snapped = lo if (e - lo) < 0.5 else lo + 1
    return 2.0 ** snapped


def qparams_from_range(scheme, lo, hi):
    """Resolve observed ranges into QParams.

    ``lo``/``hi`` are scalars (per-tensor) or equal-length sequences
    (per-channel). Symmetric signed schemes use s = max(|lo|, |hi|) over
    half the level span; asymmetric spreads (hi - lo) across the full span
    with the range first widened to contain zero, so that z always lands
    inside [qmin, qmax] and zero stays exactly representable.
    """
    lo = np.atleast_1d(np.asarray(lo, dtype=np.float64))
    hi = np.atleast_1d(np.asarray(hi, dtype=np.float64))
    if lo.shape != hi.shape or lo.ndim != 1:
        raise ValueError("lo and hi must be scalars or equal-length vectors")
    if not (np.isfinite(lo).all() and np.isfinite(hi).all()):
        raise NumericError("range endpoints must be finite")
    if (hi < lo).any():
        raise ValueError("range must satisfy lo <= hi")

    qmin, qmax = resolve_range(scheme, data_min=float(lo.min()))
    levels = float(qmax - qmin)
    if scheme.symmetry == SYMMETRIC:
        if qmin < 0:
            m = np.maximum(np.abs(lo), np.abs(hi))
            scales = m / (levels / 2.0)
        else:
            # adaptive signedness resolved unsigned: non-negative data only
            scales = hi / levels
        scales = np.maximum(scales, SCALE_FLOOR)
        zps = np.zeros(len(scales), dtype=np.int64)
    else:
        lo = np.minimum(lo, 0.0)
        hi = np.maximum(hi, 0.0)
        scales = np.maximum((hi - lo) / levels, SCALE_FLOOR)
        zps = np.clip(np.rint(qmin - lo / scales), qmin, qmax).astype(np.int64)

    if scheme.scale_form == POT_SCALE:
        scales = np.asarray([snap_pot(s) for s in scales])
    return QParams(tuple(scales), tuple(zps), qmin, qmax, scheme.scale_form)


_PRESETS = {
    "academic": BackendPreset(
        "academic",
        QScheme(symmetry=SYMMETRIC, granularity=PER_TENSOR, signedness=SIGNED),
        QScheme(symmetry=SYMMETRIC, granularity=PER_TENSOR, signedness=ADAPTIVE),
        "graph1", False),
    "trt": BackendPreset(
        "trt",
        QScheme(symmetry=SYMMETRIC, granularity=PER_CHANNEL, signedness=SIGNED),
        QScheme(symmetry=SYMMETRIC, granularity=PER_TENSOR, signedness=SIGNED),
        "graph2", True),
    # weight symmetry follows the per-backend prose (symmetric per-channel);
    # the one-line summary table lists these weights as asymmetric instead —
    # both readings are documented in the README
    "acl": BackendPreset(
        "acl",
        QScheme(symmetry=SYMMETRIC, granularity=PER_CHANNEL, signedness=SIGNED),
        QScheme(symmetry=ASYMMETRIC, granularity=PER_TENSOR, signedness=UNSIGNED),
        "graph1", True),
    "tvm": BackendPreset(
        "tvm",
        QScheme(symmetry=SYMMETRIC, granularity=PER_TENSOR,
                scale_form=POT_SCALE, signedness=SIGNED),
        QScheme(symmetry=SYMMETRIC, granularity=PER_TENSOR,
                scale_form=POT_SCALE, signedness=SIGNED),
        "graph3", True),
    "snpe": BackendPreset(
        "snpe",
        QScheme(symmetry=ASYMMETRIC, granularity=PER_TENSOR, signedness=SIGNED),
        QScheme(symmetry=ASYMMETRIC, granularity=PER_TENSOR, signedness=UNSIGNED),
        "graph3", True),
    "fbgemm": BackendPreset(
        "fbgemm",
        QScheme(symmetry=ASYMMETRIC, granularity=PER_CHANNEL, signedness=SIGNED),
        QScheme(symmetry=ASYMMETRIC, granularity=PER_TENSOR, signedness=UNSIGNED),
        "graph3", True),
}

PRESET_NAMES = tuple(sorted(_PRESETS))


def backend_preset(name):
    try:
        return _PRESETS[name]
    except KeyError:
        raise ValueError(
            f"unknown preset {name!r}; choose from {', '.join(PRESET_NAMES)}"
        ) from None
