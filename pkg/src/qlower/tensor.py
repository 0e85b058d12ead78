"""Dense tensors, the operator set, and reverse-mode differentiation.

Tensors are immutable wrappers over contiguous row-major numpy buffers.
Three element kinds exist: F32, plus two integer kinds (I8RANGE,
I32RANGE) that are stored as int32 with a declared legal envelope.

Autodiff is a flat tape: every op optionally appends one record, and
``backward`` replays the records in strict reverse order, accumulating
gradients keyed by tensor identity. Only the ops defined here (plus the
quantizer kernels in qlower.qat) are differentiable; there is no
general broadcasting.

FP32 convolutions accumulate partial sums in a fixed row-major
reduction order (see qlower._kernels) so results are bit-reproducible
and match a naive loop reference exactly.
"""

import numpy as np

from . import _kernels
from .errors import DegenerateInputError, NumericError, ShapeError

F32 = "f32"
I8RANGE = "i8"
I32RANGE = "i32"

# Legal stored-value envelopes. I8RANGE admits every 8-bit range, signed
# [-128,127] or unsigned [0,255]; per-tensor checks against the actual
# [qmin, qmax] happen where QParams are known.
_INT_ENVELOPE = {
    I8RANGE: (-128, 255),
    I32RANGE: (-(2 ** 31), 2 ** 31 - 1),
}


class Tensor:
    """Immutable dense tensor (row-major buffer plus dtype tag)."""

    __slots__ = ("data", "dtype")

    def __init__(self, data, dtype=F32):
        if dtype == F32:
            arr = np.ascontiguousarray(data, dtype=np.float32)
        elif dtype in _INT_ENVELOPE:
            arr = np.ascontiguousarray(data, dtype=np.int32)
            lo, hi = _INT_ENVELOPE[dtype]
            if arr.size and (arr.min() < lo or arr.max() > hi):
                raise ValueError(
                    f"{dtype} tensor holds values outside [{lo}, {hi}]")
        else:
            raise ValueError(f"unknown dtype {dtype!r}")
        if arr.size == 0:
            raise ShapeError("tensors must have positive extents")
        if arr is data:
            arr = arr.view()
        arr.setflags(write=False)
        object.__setattr__(self, "data", arr)
        object.__setattr__(self, "dtype", dtype)

    def __setattr__(self, name, value):
        raise AttributeError("Tensor is immutable")

    @property
    def shape(self):
        return tuple(self.data.shape)

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return int(self.data.size)

    def item(self):
        return self.data.reshape(-1)[0].item()

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype!r})"


def tensor(data, dtype=F32):
    return data if isinstance(data, Tensor) else Tensor(data, dtype)


class Tape:
    """Ordered record of forward ops; replayed in reverse by backward()."""

    def __init__(self):
        self._records = []

    def record(self, output, inputs, backward_fn):
        """backward_fn(grad_out) must return one gradient array (or None)
        per entry of ``inputs``, in order."""
        self._records.append((output, tuple(inputs), backward_fn))

    def __len__(self):
        return len(self._records)


class Gradients:
    """Gradient lookup keyed by tensor identity."""

    def __init__(self, table):
        self._table = table

    def get(self, t):
        return self._table.get(id(t))

    def __contains__(self, t):
        return id(t) in self._table


def backward(tape, loss):
    """Reverse-accumulate gradients of a scalar ``loss`` over ``tape``."""
    if loss.size != 1:
        raise ShapeError(f"loss must be scalar, got shape {loss.shape}")
    produced = {id(out) for out, _, _ in tape._records}
    if id(loss) not in produced:
        raise ValueError("loss tensor was not produced on this tape")
    table = {id(loss): np.ones(loss.shape, dtype=np.float32)}
    for out, inputs, fn in reversed(tape._records):
        g = table.get(id(out))
        if g is None:
            continue
        for t, gt in zip(inputs, fn(g)):
            if gt is None:
                continue
            prev = table.get(id(t))
            table[id(t)] = gt.astype(np.float32, copy=False) if prev is None \
                else prev + gt
    return Gradients(table)


def _need_f32(name, *ts):
    for t in ts:
        if t is not None and t.dtype != F32:
            raise ShapeError(f"{name} requires F32 operands, got {t.dtype}")


def conv2d(x, w, bias=None, stride=(1, 1), padding=(0, 0), groups=1, tape=None):
    """Cross-correlation, NCHW input by OIHW weight."""
    _need_f32("conv2d", x, w, bias)
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeError(
            f"conv2d expects 4-d input/weight, got {x.shape} and {w.shape}")
    n, c, h, wd = x.shape
    o, cg, kh, kw = w.shape
    if c % groups or o % groups:
        raise ShapeError(
            f"channels ({c} in, {o} out) not divisible by groups={groups}")
    if cg != c // groups:
        raise ShapeError(
            f"weight expects {cg * groups} input channels, input has {c} (axis 1)")
    if bias is not None and bias.shape != (o,):
        raise ShapeError(f"bias shape {bias.shape} != ({o},)")
    oh, ow = _kernels.conv_out_hw(h, wd, kh, kw, stride, padding)
    if oh < 1 or ow < 1:
        raise ShapeError(
            f"empty output {oh}x{ow} for input {h}x{wd}, kernel {kh}x{kw}, "
            f"stride {tuple(stride)}, padding {tuple(padding)}")
    y = _kernels.conv2d_forward(x.data, w.data, tuple(stride), tuple(padding),
                                groups)
    if bias is not None:
        y = y + bias.data.reshape(1, o, 1, 1)
    out = Tensor(y)
    if tape is not None:
        def bwd(g):
            dx, dw = _kernels.conv2d_backward(
                x.data, w.data, g, tuple(stride), tuple(padding), groups)
            db = g.sum(axis=(0, 2, 3)) if bias is not None else None
            return (dx, dw, db) if bias is not None else (dx, dw)
        ins = (x, w, bias) if bias is not None else (x, w)
        tape.record(out, ins, bwd)
    return out


def linear(x, w, bias=None, tape=None):
    """x (N,K) by weight (M,K) -> (N,M), ordered k-accumulation."""
    _need_f32("linear", x, w, bias)
    if x.ndim != 2 or w.ndim != 2:
        raise ShapeError(f"linear expects 2-d tensors, got {x.shape}, {w.shape}")
    n, k = x.shape
    m, k2 = w.shape
    if k != k2:
        raise ShapeError(f"inner dims disagree: input {k} (axis 1) vs weight {k2}")
    if bias is not None and bias.shape != (m,):
        raise ShapeError(f"bias shape {bias.shape} != ({m},)")
    xd, wd = x.data, w.data
    y = np.zeros((n, m), dtype=np.float32)
    for i in range(k):
        y += xd[:, i, None] * wd[None, :, i]
    if bias is not None:
        y = y + bias.data[None, :]
    out = Tensor(y)
    if tape is not None:
        def bwd(g):
            dx = np.einsum("nm,mk->nk", g, wd, optimize=False)
            dw = np.einsum("nm,nk->mk", g, xd, optimize=False)
            db = g.sum(axis=0) if bias is not None else None
            return (dx, dw, db) if bias is not None else (dx, dw)
        ins = (x, w, bias) if bias is not None else (x, w)
        tape.record(out, ins, bwd)
    return out


def batchnorm(x, gamma, beta, running_mean, running_var, eps, mode,
              momentum=0.1, tape=None):
    """Batch normalization over NCHW, per-channel affine.

    infer normalizes with the running statistics; train normalizes with
    the batch statistics (biased variance) and returns them so the
    caller can fold them into the running stats with ``ema_update`` —
    tensors are immutable, so the EMA is the graph executor's job.
    Returns (y, batch_mean, batch_var); in infer mode the running stats
    are echoed back as the statistics.
    """
    _need_f32("batchnorm", x, gamma, beta, running_mean, running_var)
    if x.ndim != 4:
        raise ShapeError(f"batchnorm expects NCHW, got {x.shape}")
    c = x.shape[1]
    for name, t in (("gamma", gamma), ("beta", beta),
                    ("running_mean", running_mean), ("running_var", running_var)):
        if t.shape != (c,):
            raise ShapeError(f"{name} shape {t.shape} != ({c},)")
    if eps <= 0:
        raise ValueError(f"eps must be positive, got {eps}")
    xd = x.data
    if mode == "train":
        cnt = xd.shape[0] * xd.shape[2] * xd.shape[3]
        if cnt < 1:
            raise DegenerateInputError("batchnorm train mode saw an empty batch")
        mean = xd.mean(axis=(0, 2, 3), dtype=np.float32)
        var = ((xd - mean.reshape(1, c, 1, 1)) ** 2).mean(
            axis=(0, 2, 3), dtype=np.float32)
        stat_mean, stat_var = mean, var
    elif mode == "infer":
        stat_mean, stat_var = running_mean.data, running_var.data
    else:
        raise ValueError(f"unknown batchnorm mode {mode!r}")

    ivar = (1.0 / np.sqrt(stat_var + np.float32(eps))).astype(np.float32)
    xc = xd - stat_mean.reshape(1, c, 1, 1)
    xhat = xc * ivar.reshape(1, c, 1, 1)
    y = gamma.data.reshape(1, c, 1, 1) * xhat + beta.data.reshape(1, c, 1, 1)
    out = Tensor(y)

    if tape is not None:
        gd = gamma.data
        if mode == "train":
            m = float(xd.shape[0] * xd.shape[2] * xd.shape[3])

            def bwd(g):
                dxhat = g * gd.reshape(1, c, 1, 1)
                s1 = dxhat.sum(axis=(0, 2, 3))
                s2 = (dxhat * xhat).sum(axis=(0, 2, 3))
                dx = (ivar.reshape(1, c, 1, 1) / m) * (
                    m * dxhat - s1.reshape(1, c, 1, 1)
                    - xhat * s2.reshape(1, c, 1, 1))
                dgamma = (g * xhat).sum(axis=(0, 2, 3))
                dbeta = g.sum(axis=(0, 2, 3))
                return dx.astype(np.float32), dgamma, dbeta
        else:
            def bwd(g):
                dx = g * (gd * ivar).reshape(1, c, 1, 1)
                dgamma = (g * xhat).sum(axis=(0, 2, 3))
                dbeta = g.sum(axis=(0, 2, 3))
                return dx.astype(np.float32), dgamma, dbeta
        tape.record(out, (x, gamma, beta), bwd)
    return out, Tensor(stat_mean), Tensor(stat_var)


def ema_update(running, batch, momentum):
    """running <- (1-momentum)*running + momentum*batch, as a new Tensor."""
    r = (1.0 - momentum) * running.data + momentum * batch.data
    return Tensor(r.astype(np.float32))


def relu(x, tape=None):
    _need_f32("relu", x)
    out = Tensor(np.maximum(x.data, np.float32(0)))
    if tape is not None:
        mask = x.data > 0
        tape.record(out, (x,), lambda g: (g * mask,))
    return out


def relu6(x, tape=None):
    _need_f32("relu6", x)
    out = Tensor(np.minimum(np.maximum(x.data, np.float32(0)), np.float32(6)))
    if tape is not None:
        mask = (x.data > 0) & (x.data < 6)
        tape.record(out, (x,), lambda g: (g * mask,))
    return out


def add(a, b, tape=None):
    _need_f32("add", a, b)
    if a.shape != b.shape:
        raise ShapeError(f"add shapes differ: {a.shape} vs {b.shape}")
    out = Tensor(a.data + b.data)
    if tape is not None:
        tape.record(out, (a, b), lambda g: (g, g))
    return out


def concat(inputs, axis, tape=None):
    if not inputs:
        raise ShapeError("concat of zero tensors")
    _need_f32("concat", *inputs)
    r = inputs[0].ndim
    if not 0 <= axis < r:
        raise ShapeError(f"concat axis {axis} out of range for rank {r}")
    for t in inputs[1:]:
        if t.ndim != r or any(t.shape[i] != inputs[0].shape[i]
                              for i in range(r) if i != axis):
            raise ShapeError(
                f"concat extents differ off axis {axis}: "
                f"{inputs[0].shape} vs {t.shape}")
    out = Tensor(np.concatenate([t.data for t in inputs], axis=axis))
    if tape is not None:
        sizes = [t.shape[axis] for t in inputs]
        splits = np.cumsum(sizes)[:-1]
        tape.record(out, tuple(inputs),
                    lambda g: tuple(np.ascontiguousarray(p)
                                    for p in np.split(g, splits, axis=axis)))
    return out


def global_avg_pool(x, tape=None):
    """Mean over the spatial dims: NCHW -> NC11."""
    _need_f32("global_avg_pool", x)
    if x.ndim != 4:
        raise ShapeError(f"global_avg_pool expects NCHW, got {x.shape}")
    n, c, h, w = x.shape
    out = Tensor(x.data.mean(axis=(2, 3), keepdims=True, dtype=np.float32))
    if tape is not None:
        inv = np.float32(1.0 / (h * w))
        tape.record(out, (x,),
                    lambda g: (np.broadcast_to(g * inv, (n, c, h, w)).copy(),))
    return out


def sum_all(x, tape=None):
    """Total sum as a scalar-shaped (1,) tensor; handy as a test loss."""
    _need_f32("sum_all", x)
    out = Tensor(np.array([x.data.sum(dtype=np.float32)], dtype=np.float32))
    if tape is not None:
        tape.record(out, (x,),
                    lambda g: (np.full(x.shape, g.reshape(-1)[0],
                                       dtype=np.float32),))
    return out


def softmax_cross_entropy(logits, labels, tape=None):
    """Mean cross-entropy of (N,K) logits against int class labels (N,).

    Returns a (1,)-shaped scalar. Gradient is (softmax - onehot)/N.
    """
    _need_f32("softmax_cross_entropy", logits)
    if logits.ndim != 2:
        raise ShapeError(f"logits must be (N,K), got {logits.shape}")
    lab = np.asarray(labels.data if isinstance(labels, Tensor) else labels)
    n, k = logits.shape
    if lab.shape != (n,):
        raise ShapeError(f"labels shape {lab.shape} != ({n},)")
    z = logits.data.astype(np.float64)
    z = z - z.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    loss = -logp[np.arange(n), lab].mean()
    if not np.isfinite(loss):
        raise NumericError("non-finite cross-entropy loss")
    out = Tensor(np.array([loss], dtype=np.float32))
    if tape is not None:
        p = np.exp(logp)

        def bwd(g):
            d = p.copy()
            d[np.arange(n), lab] -= 1.0
            return ((g.reshape(-1)[0] * d / n).astype(np.float32),)
        tape.record(out, (logits,), bwd)
    return out
