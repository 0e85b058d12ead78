"""Streaming observers and post-training calibration algorithms.

An :class:`Observer` accumulates statistics of everything it sees —
min/max, moments, a 2048-bin histogram, or a bounded sample reservoir,
depending on its kind — and a family of ``calib_*`` functions turn those
statistics into resolved :class:`~qlower.quantizer.QParams`.

Histogram bins have power-of-two width and are anchored at zero, so
growing the range (or merging two observers) folds bins exactly with no
resampling error.
"""

import math

import numpy as np

from . import quantizer as qz
from .errors import DegenerateInputError, EmptyDatasetError, NumericError
from .quantizer import (ASYMMETRIC, PER_CHANNEL, POT_SCALE, SCALE_FLOOR,
                        SYMMETRIC, QParams, qparams_from_range, resolve_range,
                        snap_pot)
from .tensor import F32, Tensor

KINDS = ("minmax", "quantile", "mse", "kld", "norm", "meanstd")
HIST_BINS = 2048
BUFFER_CAP = 1 << 20
_BUFFER_SEED = 0xC0FFEE


def _as_array(x):
    if isinstance(x, Tensor):
        if x.dtype != F32:
            raise ValueError("observers consume F32 tensors")
        return x.data
    return np.asarray(x, dtype=np.float32)


class Observer:
    """Single-writer statistics accumulator for one tensor value."""

    def __init__(self, kind, channel_axis=None, norm_p=2):
        if kind not in KINDS:
            raise ValueError(f"unknown observer kind {kind!r}")
        if kind == "kld" and channel_axis is not None:
            raise ValueError("kld calibration is per-tensor only")
        if norm_p < 1:
            raise ValueError(f"norm order must be >= 1, got {norm_p}")
        self.kind = kind
        self.channel_axis = channel_axis
        self.norm_p = norm_p
        self.count = 0
        self.min = None          # scalar or per-channel vector
        self.max = None
        self.sum = None          # meanstd moments
        self.sum_sq = None
        self.sum_pow = None      # norm: sum of |x|^p
        self.hist = None         # kld: (2048,) counts, bin width 2^hist_exp
        self.hist_exp = None
        self._buffer = None      # quantile/mse reservoir, (channels, <=cap)
        self._rng = np.random.default_rng(_BUFFER_SEED)

    # -- streaming -------------------------------------------------------

    def _channel_view(self, a):
        """Reshape to (channels, elements-per-channel); (1, n) if per-tensor."""
        if self.channel_axis is None:
            return a.reshape(1, -1)
        ax = self.channel_axis
        if not 0 <= ax < a.ndim:
            raise ValueError(f"channel axis {ax} out of range for {a.shape}")
        return np.moveaxis(a, ax, 0).reshape(a.shape[ax], -1)

    def observe(self, x):
        a = _as_array(x)
        if not np.isfinite(a).all():
            raise NumericError("observed tensor contains NaN or Inf")
        v = self._channel_view(a).astype(np.float64)
        self.count += v.size
        lo, hi = v.min(axis=1), v.max(axis=1)
        self.min = lo if self.min is None else np.minimum(self.min, lo)
        self.max = hi if self.max is None else np.maximum(self.max, hi)
        if self.kind in ("norm", "meanstd"):
            s = v.sum(axis=1)
            ss = (v * v).sum(axis=1)
            sp = (np.abs(v) ** self.norm_p).sum(axis=1)
            self.sum = s if self.sum is None else self.sum + s
            self.sum_sq = ss if self.sum_sq is None else self.sum_sq + ss
            self.sum_pow = sp if self.sum_pow is None else self.sum_pow + sp
        if self.kind in ("quantile", "mse"):
            self._buffer_extend(self._channel_view(a))
        if self.kind == "kld":
            self._hist_add(a)
        return self

    @property
    def per_channel_count(self):
        """Elements seen per channel slice."""
        ch = 1 if self.channel_axis is None else len(self.min)
        return self.count // ch

    # -- reservoir ---------------------------------------------------------

    def _buffer_extend(self, rows):
        rows = rows.astype(np.float32)
        if self._buffer is None:
            self._buffer = np.empty((rows.shape[0], 0), np.float32)
            self._seen = 0
        free = BUFFER_CAP - self._buffer.shape[1]
        if free > 0:
            take = rows[:, :free]
            self._buffer = np.concatenate([self._buffer, take], axis=1)
            self._seen += take.shape[1]
            rows = rows[:, free:]
        n = rows.shape[1]
        if n == 0:
            return
        # classic streaming reservoir, one draw per incoming column;
        # duplicate slots resolve in arrival order, matching the scalar loop
        idx = self._rng.integers(0, self._seen + 1 + np.arange(n))
        keep = idx < BUFFER_CAP
        self._buffer[:, idx[keep]] = rows[:, keep]
        self._seen += n

    # -- histogram ---------------------------------------------------------

    def _hist_needed_exp(self, maxabs):
        if maxabs == 0:
            return self.hist_exp
        # smallest e with (HIST_BINS/2) * 2^e >= maxabs
        e = math.ceil(math.log2(maxabs / (HIST_BINS // 2)))
        while (HIST_BINS // 2) * 2.0 ** e < maxabs:
            e += 1
        return e

    @staticmethod
    def _hist_fold(h):
        """Double the bin width: exact pairwise merge around the 0 anchor."""
        out = np.zeros(HIST_BINS, dtype=np.float64)
        out[HIST_BINS // 4: 3 * HIST_BINS // 4] = h.reshape(-1, 2).sum(axis=1)
        return out

    def _hist_add(self, a):
        maxabs = float(np.abs(a).max())
        need = self._hist_needed_exp(maxabs)
        if self.hist is None:
            if need is None:
                return  # all zeros so far; defer binning until data arrives
            self.hist = np.zeros(HIST_BINS, dtype=np.float64)
            self.hist_exp = need
        elif need is not None and need > self.hist_exp:
            for _ in range(need - self.hist_exp):
                self.hist = self._hist_fold(self.hist)
            self.hist_exp = need
        w = 2.0 ** self.hist_exp
        idx = np.floor(a.astype(np.float64).ravel() / w).astype(np.int64) \
            + HIST_BINS // 2
        np.clip(idx, 0, HIST_BINS - 1, out=idx)
        self.hist += np.bincount(idx, minlength=HIST_BINS)

    # -- merge -------------------------------------------------------------

    def merge(self, other):
        """Absorb another observer of the same configuration."""
        if (other.kind, other.channel_axis, other.norm_p) != \
                (self.kind, self.channel_axis, self.norm_p):
            raise ValueError("can only merge observers of identical kind")
        if other.count == 0:
            return self
        if self.count == 0:
            for name in ("count", "min", "max", "sum", "sum_sq", "sum_pow",
                         "hist", "hist_exp"):
                val = getattr(other, name)
                setattr(self, name,
                        val.copy() if isinstance(val, np.ndarray) else val)
            if other._buffer is not None:
                self._buffer = other._buffer.copy()
                self._seen = other._seen
            return self
        self.count += other.count
        self.min = np.minimum(self.min, other.min)
        self.max = np.maximum(self.max, other.max)
        if self.sum is not None:
            self.sum = self.sum + other.sum
            self.sum_sq = self.sum_sq + other.sum_sq
            self.sum_pow = self.sum_pow + other.sum_pow
        if self._buffer is not None or other._buffer is not None:
            mine = self._buffer if self._buffer is not None else None
            theirs = other._buffer
            if mine is None:
                merged = theirs
            elif theirs is None:
                merged = mine
            else:
                merged = np.concatenate([mine, theirs], axis=1)
            if merged.shape[1] > BUFFER_CAP:
                pick = self._rng.choice(merged.shape[1], BUFFER_CAP,
                                        replace=False)
                merged = merged[:, np.sort(pick)]
            self._buffer = merged
            self._seen = merged.shape[1]
        if other.hist is not None:
            if self.hist is None:
                self.hist, self.hist_exp = other.hist.copy(), other.hist_exp
            else:
                a, ae = self.hist, self.hist_exp
                b, be = other.hist.copy(), other.hist_exp
                while ae < be:
                    a, ae = self._hist_fold(a), ae + 1
                while be < ae:
                    b, be = self._hist_fold(b), be + 1
                self.hist, self.hist_exp = a + b, ae
        return self

    # -- derived views -----------------------------------------------------

    def _require_data(self):
        if self.count == 0:
            raise EmptyDatasetError(f"{self.kind} observer saw no data")

    @property
    def mean(self):
        self._require_data()
        return self.sum / self.per_channel_count

    @property
    def std(self):
        m = self.mean
        var = self.sum_sq / self.per_channel_count - m * m
        return np.sqrt(np.maximum(var, 0.0))

    def samples(self):
        self._require_data()
        if self._buffer is None:
            raise ValueError(f"{self.kind} observer keeps no sample buffer")
        return self._buffer


def _concrete(scheme, data_min):
    """Pin adaptive signedness to the observed data."""
    if scheme.signedness != qz.ADAPTIVE:
        return scheme
    sign = qz.UNSIGNED if data_min >= 0 else qz.SIGNED
    return qz.QScheme(scheme.bitwidth, scheme.symmetry, scheme.granularity,
                      scheme.axis, scheme.scale_form, sign)


def _check_granularity(obs, scheme):
    if (scheme.granularity == PER_CHANNEL) != (obs.channel_axis is not None):
        raise ValueError(
            "observer channel configuration does not match scheme granularity")


def calib_minmax(obs, scheme):
    """Full observed range, no clipping."""
    obs._require_data()
    _check_granularity(obs, scheme)
    sch = _concrete(scheme, float(np.min(obs.min)))
    return qparams_from_range(sch, obs.min, obs.max)


def calib_quantile(obs, scheme, alpha=0.9999):
    """Clip to the [1-alpha, alpha] sample quantiles."""
    if not 0.5 < alpha <= 1.0:
        raise ValueError(f"alpha must lie in (0.5, 1], got {alpha}")
    _check_granularity(obs, scheme)
    buf = obs.samples()
    lo = np.quantile(buf, 1.0 - alpha, axis=1)
    hi = np.quantile(buf, alpha, axis=1)
    sch = _concrete(scheme, float(lo.min()))
    return qparams_from_range(sch, lo, hi)


def _grid_candidates(scheme, lo, hi):
    """100 candidate clip ranges per channel, widest last."""
    fracs = np.arange(1, 101, dtype=np.float64) / 100.0
    if scheme.symmetry == SYMMETRIC:
        m = np.maximum(np.abs(lo), np.abs(hi))
        his = np.outer(fracs, m)
        qmin, _ = resolve_range(scheme)
        los = -his if qmin < 0 else np.zeros_like(his)
    else:
        span = hi - lo
        shrink = np.outer((1.0 - fracs) / 2.0, span)
        los, his = lo + shrink, hi - shrink
    return los, his


def calib_mse(obs, scheme):
    """Grid-search the clip range minimizing mean squared rounding error."""
    _check_granularity(obs, scheme)
    buf = obs.samples()
    sch = _concrete(scheme, float(np.min(obs.min)))
    los, his = _grid_candidates(sch, obs.min.astype(np.float64),
                                obs.max.astype(np.float64))
    channels = buf.shape[0]
    best_lo = np.array(obs.min, dtype=np.float64, copy=True)
    best_hi = np.array(obs.max, dtype=np.float64, copy=True)
    best_err = np.full(channels, np.inf)
    x = Tensor(buf)
    for lo_c, hi_c in zip(los, his):
        qp = qparams_from_range(sch, lo_c, hi_c)
        fq = qz.fake_quantize(x, qp, axis=0)
        err = ((fq.data.astype(np.float64) - buf) ** 2).mean(axis=1)
        better = err < best_err
        best_err[better] = err[better]
        best_lo[better] = lo_c[better]
        best_hi[better] = hi_c[better]
    return qparams_from_range(sch, best_lo, best_hi)


def _kl_divergence(p, q):
    p = p + 1e-9
    q = q + 1e-9
    p = p / p.sum()
    q = q / q.sum()
    return float(np.sum(p * np.log(p / q)))


def _merge_to_levels(p, levels):
    """Quantized view of a histogram: each chunk's mass spread uniformly.

    Spreading over the whole chunk (not just its occupied bins) is what
    penalizes narrow spikes inside wide quantization steps, which is the
    pressure that makes the sweep clip isolated outliers.
    """
    n = len(p)
    bounds = (np.arange(levels + 1, dtype=np.int64) * n) // levels
    q = np.zeros_like(p)
    for j in range(levels):
        a, b = bounds[j], bounds[j + 1]
        if a > b - 1:
            continue
        q[a:b] = p[a:b].sum() / (b - a)
    return q


def _kld_sweep(hist, levels):
    """KL of every candidate prefix length; index i keeps bins [:i]."""
    n = len(hist)
    start = min(levels, n)
    kls = np.full(n + 1, np.inf)
    for i in range(start, n + 1):
        p = hist[:i].astype(np.float64).copy()
        p[-1] += hist[i:].sum()
        q = _merge_to_levels(hist[:i].astype(np.float64), levels)
        kls[i] = _kl_divergence(p, q)
    return kls


def calib_kld(obs, scheme):
    """Histogram threshold sweep minimizing KL(observed || quantized)."""
    obs._require_data()
    if scheme.granularity == PER_CHANNEL:
        raise ValueError("kld calibration is per-tensor only")
    if obs.hist is None:
        raise DegenerateInputError("histogram is empty (all-zero data)")
    sch = _concrete(scheme, float(obs.min[0]))
    w = 2.0 ** obs.hist_exp
    half = HIST_BINS // 2
    if sch.symmetry == SYMMETRIC:
        pos = obs.hist[half:]
        neg = obs.hist[:half][::-1]
        folded = pos + neg
        levels = 2 ** (sch.bitwidth - 1)
        qmin, _ = resolve_range(sch)
        if qmin == 0:
            levels = 2 ** sch.bitwidth
        kls = _kld_sweep(folded, levels)
        i = int(np.argmin(kls))
        t = i * w
        lo = -t if qmin < 0 else 0.0
        return qparams_from_range(sch, lo, t)
    lo_bin = int(math.floor(float(obs.min[0]) / w)) + half
    tail = obs.hist[lo_bin:]
    kls = _kld_sweep(tail, 2 ** sch.bitwidth)
    i = int(np.argmin(kls))
    t_hi = (lo_bin + i - half) * w
    return qparams_from_range(sch, float(obs.min[0]), t_hi)


def calib_norm(obs, scheme, p=2, reduction="mean"):
    """Moment-based scale: s = 2 * mean(|x|^p)^(1/p) / sqrt(qmax)."""
    if p < 1:
        raise ValueError(f"norm order must be >= 1, got {p}")
    if p != obs.norm_p:
        raise ValueError(
            f"observer accumulated |x|^{obs.norm_p}, cannot serve p={p}")
    if reduction not in ("mean", "sum"):
        raise ValueError(f"unknown reduction {reduction!r}")
    obs._require_data()
    _check_granularity(obs, scheme)
    sch = _concrete(scheme, float(np.min(obs.min)))
    qmin, qmax = resolve_range(sch)
    acc = obs.sum_pow
    if reduction == "mean":
        acc = acc / obs.per_channel_count
    scales = np.maximum(2.0 * acc ** (1.0 / p) / math.sqrt(qmax), SCALE_FLOOR)
    if sch.scale_form == POT_SCALE:
        scales = [snap_pot(float(s)) for s in scales]
    zps = (0,) * len(scales)
    return QParams(tuple(scales), zps, qmin, qmax, sch.scale_form)


def calib_meanstd(obs, scheme, alpha=3.0):
    """Clip range mu +- alpha * sigma from running moments."""
    obs._require_data()
    _check_granularity(obs, scheme)
    m, s = obs.mean, obs.std
    sch = _concrete(scheme, float(np.min(obs.min)))
    return qparams_from_range(sch, m - alpha * s, m + alpha * s)


def recalibrate_bn_stats(graph, dataset, params=None):
    """Replace BN running statistics with averaged batch statistics.

    Runs train-mode forwards (quantizers stay active) over the calibration
    batches and writes the simple average of per-batch mean/var back into
    each BN node. Quantization parameters are untouched.
    """
    from . import graph as graph_mod
    return graph_mod.recalibrate_bn_stats(graph, dataset, params)
