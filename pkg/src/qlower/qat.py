"""Trainable quantizer kernels and a small quantization-aware training loop.

The graph executor delegates every fake-quantize in training mode to a
``quant_fn`` hook; this module supplies the hook. Each quantization point
gets a :class:`TrainableQuant` that owns the kernel's learnable parameters
(LSQ scale, LSQ+ zero-point, PACT clip bounds) or streaming state (DSQ's
running activation range) and records the kernel's gradient rules on the
tape. ``train_qat`` wraps the whole thing in SGD with Nesterov momentum,
linear warmup, and cosine annealing.

In evaluation mode every kernel collapses to plain ``fake_quantize`` over
its resolved parameters; the kernels differ only in how they behave (and
what they learn) during training.
"""

import json
import math

import numpy as np

from . import graph as G
from . import quantizer as qz
from .errors import CalibrationRequiredError, EmptyDatasetError, NumericError
from .tensor import Tape, Tensor, backward, softmax_cross_entropy

DSQ_ALPHA = 0.4                  # shape parameter of the soft cell function
PACT_ALPHA_INIT = 6.0            # handcrafted clip initialization
PACT_ALPHA_FLOOR = 1e-4          # projection target when alpha drops <= 0
RANGE_EMA_MOMENTUM = 0.9         # running batch-min/max momentum (DSQ acts)

_WEIGHT_TRANSFORM_KERNELS = ("dorefa", "pact")  # weights go through tanh


def _axis_of(scheme):
    return scheme.axis if scheme.granularity == qz.PER_CHANNEL else None


def _bshape(arr, ndim, axis):
    shape = [1] * ndim
    shape[axis] = -1
    return np.asarray(arr, dtype=np.float64).reshape(shape)


def _reduce_like_param(vals, axis):
    """Collapse an elementwise gradient onto the parameter's (C,) shape."""
    if axis is None:
        return np.array([vals.sum()], dtype=np.float32)
    axes = tuple(i for i in range(vals.ndim) if i != axis)
    return vals.sum(axis=axes).astype(np.float32)


def dorefa_weight_transform(w, tape=None):
    """tanh-normalize weights into [-1, 1]; the normalizer max|tanh(w)| is
    treated as a constant for gradients. All-zero input passes through."""
    th = np.tanh(w.data.astype(np.float64))
    m = float(np.abs(th).max())
    if m == 0.0:
        out = Tensor(w.data.copy())
        if tape is not None:
            tape.record(out, (w,), lambda g: (g,))
        return out
    out = Tensor((th / m).astype(np.float32))
    if tape is not None:
        dwt = ((1.0 - th * th) / m).astype(np.float32)
        tape.record(out, (w,), lambda g: (g * dwt,))
    return out


class TrainableQuant:
    """One quantization point's trainable state.

    Parameters are held as Tensors so the tape's identity-keyed gradient
    lookup reaches them; the trainer swaps in updated Tensors after each
    optimizer step.
    """

    def __init__(self, kernel, scheme, qp=None, weight=None, is_weight=False,
                 sum_norm=False):
        if kernel not in G.KERNELS:
            raise ValueError(f"unknown quantizer kernel {kernel!r}")
        self.kernel = kernel
        self.scheme = scheme
        self.axis = _axis_of(scheme)
        self.is_weight = is_weight
        self.sum_norm = sum_norm
        self.qp = qp
        if qp is not None:
            self.qmin, self.qmax = qp.qmin, qp.qmax
        elif weight is not None:
            self.qmin, self.qmax = qz.resolve_range(
                scheme, data_min=float(weight.data.min()))
        else:
            self.qmin, self.qmax = qz.resolve_range(scheme, data_min=-1.0)
        self.s = None            # learnable scale (lsq, lsq+)
        self.z = None            # learnable zero-point (lsq+ asymmetric)
        self.z_fixed = None      # frozen zero-points (lsq)
        self.alpha = None        # upper clip (pact)
        self.beta = None         # lower clip (pact asymmetric)
        self.grad_scale = None
        self.range_lo = None     # running activation range (dsq)
        self.range_hi = None
        self._init_kernel(weight)

    # -- initialization ------------------------------------------------------

    def _init_kernel(self, weight):
        k = self.kernel
        if k in ("lsq", "lsq+"):
            self._init_lsq(weight)
        elif k == "pact" and not self.is_weight:
            self.alpha = Tensor(np.array([PACT_ALPHA_INIT], dtype=np.float32))
            if self.scheme.symmetry == qz.ASYMMETRIC:
                self.beta = Tensor(
                    np.array([-PACT_ALPHA_INIT], dtype=np.float32))
        elif k == "dsq" and not self.is_weight:
            if self.qp is None:
                raise CalibrationRequiredError(["<dsq activation>"])
            s = np.asarray(self.qp.scales, dtype=np.float64)
            z = np.asarray(self.qp.zero_points, dtype=np.float64)
            self.range_lo = float((s * (self.qmin - z)).min())
            self.range_hi = float((s * (self.qmax - z)).max())
        # dorefa / pact weights / dsq weights derive everything per forward

    def _init_lsq(self, weight):
        n_max = float(self.qmax)
        if self.is_weight:
            if weight is None:
                raise ValueError("lsq weight quantizer needs the weight")
            wd = np.abs(weight.data.astype(np.float64))
            if self.axis is None:
                norm = wd.sum() if self.sum_norm else wd.mean()
                scales = np.array([norm])
                m = wd.size
            else:
                axes = tuple(i for i in range(wd.ndim) if i != self.axis)
                norm = wd.sum(axis=axes) if self.sum_norm \
                    else wd.mean(axis=axes)
                scales = np.asarray(norm, dtype=np.float64)
                m = wd.size // wd.shape[self.axis]
            scales = np.maximum(2.0 * scales / math.sqrt(n_max),
                                qz.SCALE_FLOOR)
            self.grad_scale = 1.0 / math.sqrt(m * n_max)
            zps = np.zeros(len(scales))
            if self.scheme.symmetry == qz.ASYMMETRIC and self.qp is not None:
                zps = np.asarray(self.qp.zero_points, dtype=np.float64)
        else:
            if self.qp is None:
                raise CalibrationRequiredError(["<lsq activation>"])
            scales = np.asarray(self.qp.scales, dtype=np.float64)
            zps = np.asarray(self.qp.zero_points, dtype=np.float64)
            # element count per sample is only known at the first forward
        self.s = Tensor(scales.astype(np.float32))
        if self.kernel == "lsq+" and self.scheme.symmetry == qz.ASYMMETRIC:
            self.z = Tensor(zps.astype(np.float32))
        else:
            self.z_fixed = zps

    # -- parameter plumbing ---------------------------------------------------

    def trainable_params(self):
        out = {}
        for name in ("s", "z", "alpha", "beta"):
            t = getattr(self, name)
            if t is not None:
                out[name] = t
        return out

    def set_param(self, name, tensor):
        setattr(self, name, tensor)

    def project(self):
        """Keep parameters in their valid half-spaces after an SGD step."""
        if self.s is not None and (self.s.data < qz.SCALE_FLOOR).any():
            self.s = Tensor(np.maximum(self.s.data, qz.SCALE_FLOOR)
                            .astype(np.float32))
        if self.alpha is not None and float(self.alpha.data[0]) <= 0.0:
            self.alpha = Tensor(np.array([PACT_ALPHA_FLOOR],
                                         dtype=np.float32))

    # -- forward/backward ------------------------------------------------------

    def apply(self, x, tape=None, training=True):
        k = self.kernel
        if k in ("lsq", "lsq+"):
            return self._apply_lsq(x, tape)
        if k == "dorefa" or (k == "pact" and self.is_weight):
            if self.is_weight:
                return self._apply_dorefa_weight(x, tape)
            return self._apply_dorefa_act(x, tape)
        if k == "pact":
            return self._apply_pact(x, tape)
        if k == "dsq":
            return self._apply_dsq(x, tape, training)
        raise ValueError(f"kernel {k!r} has no trainable forward")

    def _apply_lsq(self, x, tape):
        axis = self.axis
        xd = x.data.astype(np.float64)
        if self.grad_scale is None:
            per_sample = max(1, x.size // max(1, x.shape[0]))
            self.grad_scale = 1.0 / math.sqrt(per_sample * float(self.qmax))
        g = self.grad_scale
        s_t, z_t = self.s, self.z
        s = s_t.data.astype(np.float64)
        z = z_t.data.astype(np.float64) if z_t is not None else self.z_fixed
        if axis is not None:
            s = _bshape(s, xd.ndim, axis)
            z = _bshape(z, xd.ndim, axis)
        else:
            s, z = s[0], z[0]
        v = xd / s + z
        r = np.rint(v)
        q = np.clip(r, self.qmin, self.qmax)
        y = Tensor((s * (q - z)).astype(np.float32))
        self.qp = None  # stale; resolve on demand
        if tape is not None:
            inside = (v > self.qmin) & (v < self.qmax)
            below = v <= self.qmin
            above = v >= self.qmax
            ds_elem = np.where(inside, r - v,
                               np.where(below, self.qmin - z,
                                        self.qmax - z)) * g
            inputs = (x, s_t) if z_t is None else (x, s_t, z_t)

            def bwd(up):
                upd = up.astype(np.float64)
                dx = (upd * inside).astype(np.float32)
                ds = _reduce_like_param(upd * ds_elem, axis)
                if z_t is None:
                    return dx, ds
                dz = _reduce_like_param(upd * (-s) * g * (below | above),
                                        axis)
                return dx, ds, dz
            tape.record(y, inputs, bwd)
        return y

    def _apply_pact(self, x, tape):
        a_t, b_t = self.alpha, self.beta
        a = float(a_t.data[0])
        lo = float(b_t.data[0]) if b_t is not None else -a
        qp = qz.qparams_from_range(self.scheme, lo, a)
        self.qp = qp
        xc = Tensor(np.clip(x.data, lo, a).astype(np.float32))
        y = qz.fake_quantize(xc, qp)
        if tape is not None:
            xd = x.data.astype(np.float64)
            inside = (xd > lo) & (xd < a)
            hi_sat = xd >= a
            lo_sat = xd <= lo

            def bwd(up):
                upd = up.astype(np.float64)
                dx = (upd * inside).astype(np.float32)
                if b_t is not None:
                    da = np.array([(upd * hi_sat).sum()], dtype=np.float32)
                    db = np.array([(upd * lo_sat).sum()], dtype=np.float32)
                    return dx, da, db
                da = np.array([(upd * hi_sat).sum() - (upd * lo_sat).sum()],
                              dtype=np.float32)
                return dx, da
            tape.record(y, (x, a_t) if b_t is None else (x, a_t, b_t), bwd)
        return y

    def _apply_dorefa_weight(self, x, tape):
        th = np.tanh(x.data.astype(np.float64))
        if self.axis is None:
            m = np.abs(th).max()
            m_safe = m if m > 0 else 1.0
        else:
            axes = tuple(i for i in range(th.ndim) if i != self.axis)
            m = np.abs(th).max(axis=axes)
            m_safe = _bshape(np.where(m > 0, m, 1.0), th.ndim, self.axis)
        wt = th / m_safe
        qp = self._dorefa_qp(wt)
        self.qp = qp
        y = qz.fake_quantize(Tensor(wt.astype(np.float32)), qp, self.axis)
        if tape is not None:
            dwt = ((1.0 - th * th) / m_safe)

            # DoReFa treats quantization as a straight-through identity over
            # the whole normalized range, so no clip gating here
            def bwd(up):
                return ((up.astype(np.float64) * dwt).astype(np.float32),)
            tape.record(y, (x,), bwd)
        return y

    def _dorefa_qp(self, wt):
        if self.scheme.symmetry == qz.SYMMETRIC:
            ones = np.ones(1 if self.axis is None
                           else wt.shape[self.axis])
            return qz.qparams_from_range(self.scheme, -ones, ones)
        if self.axis is None:
            return qz.qparams_from_range(self.scheme, float(wt.min()),
                                         float(wt.max()))
        axes = tuple(i for i in range(wt.ndim) if i != self.axis)
        return qz.qparams_from_range(self.scheme, wt.min(axis=axes),
                                     wt.max(axis=axes))

    def _apply_dorefa_act(self, x, tape):
        lo, hi = (-1.0, 1.0) if self.qmin < 0 else (0.0, 1.0)
        qp = qz.qparams_from_range(self.scheme, lo, hi)
        self.qp = qp
        xc = Tensor(np.clip(x.data, lo, hi).astype(np.float32))
        y = qz.fake_quantize(xc, qp)
        if tape is not None:
            xd = x.data.astype(np.float64)
            inside = (xd > lo) & (xd < hi)
            tape.record(y, (x,),
                        lambda up: ((up * inside).astype(np.float32),))
        return y

    def _dsq_range(self, x, training):
        if self.is_weight:
            xd = x.data.astype(np.float64)
            if self.axis is None:
                mu, sig = xd.mean(), xd.std()
            else:
                axes = tuple(i for i in range(xd.ndim) if i != self.axis)
                mu, sig = xd.mean(axis=axes), xd.std(axis=axes)
            return mu - 2.6 * sig, mu + 2.6 * sig
        if training:
            bmin = float(x.data.min())
            bmax = float(x.data.max())
            mom = RANGE_EMA_MOMENTUM
            self.range_lo = mom * self.range_lo + (1 - mom) * bmin
            self.range_hi = mom * self.range_hi + (1 - mom) * bmax
        return self.range_lo, self.range_hi

    def _apply_dsq(self, x, tape, training):
        lo, hi = self._dsq_range(x, training)
        qp = qz.qparams_from_range(self.scheme, lo, hi)
        self.qp = qp
        if not training:
            return qz.fake_quantize(x, qp, self.axis)
        xd = x.data.astype(np.float64)
        s = np.asarray(qp.scales, dtype=np.float64)
        z = np.asarray(qp.zero_points, dtype=np.float64)
        if self.axis is not None:
            s = _bshape(s, xd.ndim, self.axis)
            z = _bshape(z, xd.ndim, self.axis)
        else:
            s, z = s[0], z[0]
        if np.any(s <= 0):
            raise NumericError("dsq cell width must be positive")
        glo, ghi = s * (self.qmin - z), s * (self.qmax - z)
        xc = np.clip(xd, glo, ghi)
        v = xc / s + z
        cell = np.clip(np.rint(v), self.qmin, self.qmax)
        r = v - cell
        k = math.log(2.0 / DSQ_ALPHA - 1.0)
        amp = 1.0 / (2.0 * (1.0 - DSQ_ALPHA))
        t = np.tanh(k * r)
        y = Tensor((s * (cell + amp * t - z)).astype(np.float32))
        if tape is not None:
            inside = (xd > glo) & (xd < ghi)
            dx = amp * k * (1.0 - t * t) * inside
            tape.record(y, (x,),
                        lambda up: ((up * dx).astype(np.float32),))
        return y

    # -- export ----------------------------------------------------------------

    def resolved_qparams(self, tensor=None):
        """QParams reproducing this kernel's settled evaluation behavior.

        ``tensor`` is the tensor the quantizer will see at evaluation time
        (for transform kernels: the already-normalized weight).
        """
        k = self.kernel
        if k in ("lsq", "lsq+"):
            scales = np.maximum(self.s.data.astype(np.float64),
                                qz.SCALE_FLOOR)
            if self.scheme.scale_form == qz.POT_SCALE:
                scales = np.array([qz.snap_pot(float(v)) for v in scales])
            z = self.z.data.astype(np.float64) if self.z is not None \
                else self.z_fixed
            zps = np.clip(np.rint(z), self.qmin, self.qmax).astype(np.int64)
            return qz.QParams(tuple(scales), tuple(zps), self.qmin,
                              self.qmax, self.scheme.scale_form)
        if k == "pact" and not self.is_weight:
            a = float(self.alpha.data[0])
            lo = float(self.beta.data[0]) if self.beta is not None else -a
            return qz.qparams_from_range(self.scheme, lo, a)
        if self.is_weight and k in _WEIGHT_TRANSFORM_KERNELS:
            if tensor is not None:
                self.qp = self._dorefa_qp(tensor.data.astype(np.float64))
        elif k == "dorefa":
            lo, hi = (-1.0, 1.0) if self.qmin < 0 else (0.0, 1.0)
            self.qp = qz.qparams_from_range(self.scheme, lo, hi)
        elif k == "dsq" and tensor is not None:
            lo, hi = self._dsq_range(tensor, training=False)
            self.qp = qz.qparams_from_range(self.scheme, lo, hi)
        if self.qp is None:
            raise ValueError(
                f"kernel {k!r} has no resolved parameters yet; run a "
                f"forward or pass the tensor it quantizes")
        return self.qp


# -- wiring into the graph executor ---------------------------------------------


def lsq_init(w, scheme, sum_norm=False, kernel="lsq"):
    """Scale/grad-scale initialization for learned-step quantization.

    s = 2*mean(|w|)/sqrt(N_max) per scale group (sum instead of mean when
    ``sum_norm``); grad scale g = 1/sqrt(M*N_max) with M the element count
    governed by one scale.
    """
    if w.size == 0:
        raise ValueError("lsq_init needs a nonempty tensor")
    return TrainableQuant(kernel, scheme, weight=w, is_weight=True,
                          sum_norm=sum_norm)


def set_kernel(graph, kernel):
    """New graph with every quantizer's training kernel re-tagged."""
    if kernel not in G.KERNELS:
        raise ValueError(f"unknown quantizer kernel {kernel!r}")
    nodes = []
    for n in graph.nodes:
        attrs = dict(n.attrs)
        changed = False
        if n.op == "fakequant":
            attrs["kernel"] = kernel
            changed = True
        if "wq" in attrs:
            attrs["wq"] = dict(attrs["wq"], kernel=kernel)
            changed = True
        nodes.append(G.Node(n.id, n.op, attrs, n.inputs) if changed else n)
    return G.Graph(nodes, graph.params, graph.inputs, graph.outputs)


def prepare_trainables(graph, qparams, sum_norm=False):
    """Build {key: TrainableQuant} for every quantization point."""
    qparams = qparams or {}
    registry = {}
    missing = []
    for n in graph.nodes:
        sites = []
        if n.op == "fakequant":
            sites.append((n.attrs.get("key", n.id), n.attrs["scheme"],
                          n.attrs.get("kernel", "fixed"),
                          n.attrs.get("param")))
        wq = n.attrs.get("wq")
        if wq is not None:
            sites.append((wq.get("key", n.id + ":w"), wq["scheme"],
                          wq.get("kernel", "fixed"), ("bn-fold", n.id)))
        for key, scheme_attrs, kernel, src in sites:
            if key in registry or kernel == "fixed":
                if kernel == "fixed" and key not in qparams:
                    missing.append(key)
                continue
            if key not in qparams:
                missing.append(key)
                continue
            scheme = G.scheme_from_attrs(scheme_attrs)
            weight = None
            if isinstance(src, tuple):  # folded weight inside a conv
                if kernel in _WEIGHT_TRANSFORM_KERNELS:
                    raise ValueError(
                        f"kernel {kernel!r} transforms the weight tensor "
                        f"and cannot ride on-the-fly BN folding (node "
                        f"{src[1]!r}); fold with strategy 0 first")
                weight = Tensor(G.folded_weight(graph, n))
            elif src is not None:
                weight = graph.params[src]
            registry[key] = TrainableQuant(
                kernel, scheme, qp=qparams[key], weight=weight,
                is_weight=src is not None, sum_norm=sum_norm)
            registry[key].param_name = src if isinstance(src, str) else None
    if missing:
        raise CalibrationRequiredError(sorted(set(missing)))
    return registry


def make_quant_fn(registry):
    """The executor hook: dispatch each quantize to its trainable kernel."""

    def quant_fn(key, scheme, qp, x, axis, kernel, tape):
        if kernel == "fixed":
            y = qz.fake_quantize(x, qp, axis)
            if tape is not None:
                s = np.asarray(qp.scales, dtype=np.float64)
                z = np.asarray(qp.zero_points, dtype=np.float64)
                if axis is not None:
                    s = _bshape(s, x.ndim, axis)
                    z = _bshape(z, x.ndim, axis)
                v = x.data.astype(np.float64) / s + z
                mask = ((v > qp.qmin) & (v < qp.qmax)).astype(np.float32)
                tape.record(y, (x,), lambda g: (g * mask,))
            return y
        tq = registry.get(key)
        if tq is None:
            raise KeyError(f"no trainable quantizer prepared for {key!r}")
        return tq.apply(x, tape, training=True)

    return quant_fn


# -- optimizer and schedule ------------------------------------------------------


def lr_at(step, total_steps, peak, warmup_steps):
    """Linear warmup to ``peak`` then cosine annealing toward zero."""
    if warmup_steps > 0 and step < warmup_steps:
        return peak * step / warmup_steps
    span = max(1, total_steps - warmup_steps)
    return peak * 0.5 * (1.0 + math.cos(math.pi * (step - warmup_steps)
                                        / span))


class _SGD:
    """SGD with classical or Nesterov momentum and decoupled decay flags."""

    def __init__(self, momentum=0.9, nesterov=True, weight_decay=0.0):
        self.momentum = momentum
        self.nesterov = nesterov
        self.weight_decay = weight_decay
        self.buffers = {}

    def step(self, name, value, grad, lr, decay):
        d = grad.astype(np.float64)
        if decay and self.weight_decay:
            d = d + self.weight_decay * value.astype(np.float64)
        mu = self.momentum
        buf = self.buffers.get(name)
        buf = d if buf is None else mu * buf + d
        self.buffers[name] = buf
        if lr == 0.0:  # exact no-op (warmup step 0 still feeds the buffer)
            return value
        upd = d + mu * buf if self.nesterov else buf
        return (value - np.float32(lr) * upd.astype(np.float32)) \
            .astype(np.float32)


def trainable_parameter_names(graph):
    """Parameter-table names that receive gradients: weights, biases, and
    BN affine terms. Running statistics are buffers and stay out."""
    names = set()
    for n in graph.nodes:
        if n.op == "fakequant" and n.attrs.get("param"):
            names.add(n.attrs["param"])
        if n.op in ("conv2d", "linear"):
            if n.attrs.get("weight"):
                names.add(n.attrs["weight"])
            if n.attrs.get("bias"):
                names.add(n.attrs["bias"])
            bn = n.attrs.get("bn")
            if bn:
                names.update((bn["gamma"], bn["beta"]))
        elif n.op == "bn":
            names.update((n.attrs["gamma"], n.attrs["beta"]))
    return sorted(names & set(graph.params))


# -- the training loop -------------------------------------------------------------


def _as_batch(item):
    x, labels = item
    if not isinstance(x, Tensor):
        x = Tensor(np.asarray(x, dtype=np.float32))
    return x, np.asarray(labels)


def train_qat(graph, data, cfg, qparams=None):
    """Fine-tune a (possibly fake-quantized) graph on labeled batches.

    ``data`` is a sequence of (inputs, int labels) pairs; ``cfg`` carries
    {kernel, epochs, lr, momentum, nesterov, weight_decay, warmup_epochs,
    seed, decay_quant_params, sum_norm, metrics_path}. Returns
    (trained graph, resolved qparams, metrics records). The graph must
    already carry calibrated quantizers, or none at all for a pure FP32
    run.
    """
    batches = [_as_batch(b) for b in data]
    if not batches:
        raise EmptyDatasetError("training dataset is empty")
    kernel = cfg.get("kernel")
    if kernel is not None and graph.has_fakequant():
        graph = set_kernel(graph, kernel)
    epochs = int(cfg.get("epochs", 1))
    peak_lr = float(cfg.get("lr", 0.01))
    warmup = int(cfg.get("warmup_epochs", 1)) * len(batches)
    total = epochs * len(batches)
    opt = _SGD(momentum=float(cfg.get("momentum", 0.9)),
               nesterov=bool(cfg.get("nesterov", True)),
               weight_decay=float(cfg.get("weight_decay", 0.0)))
    decay_quant = bool(cfg.get("decay_quant_params", False))

    registry = {}
    if graph.has_fakequant():
        registry = prepare_trainables(graph, qparams,
                                      sum_norm=bool(cfg.get("sum_norm",
                                                            False)))
    quant_fn = make_quant_fn(registry) if graph.has_fakequant() else None
    param_names = trainable_parameter_names(graph)
    state = dict(graph.params)
    out_id = graph.outputs[0]
    metrics = []

    step = 0
    for _ in range(epochs):
        for x, labels in batches:
            tape = Tape()
            outs, rt = G.infer(graph, x, qparams, mode="train", tape=tape,
                               state=state, quant_fn=quant_fn)
            logits = outs[out_id]
            try:
                loss = softmax_cross_entropy(logits, labels, tape)
            except NumericError as e:
                raise NumericError(
                    f"training diverged at step {step}: {e}") from None
            loss_val = float(loss.data[0])
            if not math.isfinite(loss_val):
                raise NumericError(
                    f"training diverged at step {step}: loss={loss_val}")
            acc = float(np.mean(np.argmax(logits.data, axis=1) == labels))
            grads = backward(tape, loss)
            lr = lr_at(step, total, peak_lr, warmup)

            for name in param_names:
                t = state[name]
                g = grads.get(t)
                if g is not None:
                    state[name] = Tensor(opt.step(name, t.data, g, lr, True))
            for key, tq in registry.items():
                for pname, pt in tq.trainable_params().items():
                    g = grads.get(pt)
                    if g is not None:
                        tq.set_param(pname, Tensor(
                            opt.step(f"{key}#{pname}", pt.data, g, lr,
                                     decay_quant)))
                tq.project()

            metrics.append({"step": step, "lr": lr, "loss": loss_val,
                            "acc": acc})
            step += 1

    graph = graph.with_params(state)
    qparams_out = dict(qparams or {})
    for key, tq in registry.items():
        anchor = None
        if tq.param_name is not None:
            anchor = graph.params[tq.param_name]
            if tq.is_weight and tq.kernel in _WEIGHT_TRANSFORM_KERNELS:
                # bake the tanh-normalization so plain fake-quant (and
                # integer lowering) see the tensor the kernel trained on
                graph = graph.with_params(
                    {tq.param_name: dorefa_weight_transform(anchor)})
                anchor = graph.params[tq.param_name]
        elif tq.is_weight:
            node = _wq_node_for(graph, key)
            if node is not None:
                anchor = Tensor(G.folded_weight(graph, node))
        qparams_out[key] = tq.resolved_qparams(anchor)

    path = cfg.get("metrics_path")
    if path:
        with open(path, "w", encoding="utf-8") as fh:
            for rec in metrics:
                fh.write(json.dumps(rec, sort_keys=True) + "\n")
    return graph, qparams_out, metrics


def _wq_node_for(graph, key):
    for n in graph.nodes:
        wq = n.attrs.get("wq")
        if wq is not None and wq.get("key", n.id + ":w") == key:
            return n
    return None
