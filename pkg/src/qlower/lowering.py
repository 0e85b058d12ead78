"""Lower a calibrated fake-quantized graph to integer-only execution.

``lower`` turns a graph whose batch norms are statically folded and whose
quantizers are calibrated into a :class:`QuantizedGraph`: weights become
stored integer levels, biases INT32 values at the accumulator scale
s_w*s_x, and every weight-dependent zero-point cross term is precomputed.
``run_int`` executes that program with INT32 accumulation and explicit
requantization between layers, and ``compare_fake_real`` pairs it against
the floating-point fake-quantize simulation wire by wire.

Wire representations during integer execution:

==========  ==================================================
f32         raw floats, only upstream of the first quantizer
i8          8-bit levels plus the QParams that produced them
acc         INT32 accumulator at scale s_w*s_x (zero point 0)
==========  ==================================================

Integer tensors travel as int64 ndarrays internally so that overflow is
*detected* (checked against the INT32 envelope, raising
:class:`AccumulatorOverflowError`) rather than silently wrapped.
"""

import dataclasses
import json

import numpy as np

from . import quantizer as qz
from ._kernels import conv2d_int
from .errors import (AccumulatorOverflowError, CalibrationRequiredError,
                     EmptyDatasetError, SchemaError, ShapeError)
from .graph import (infer, load_model, load_qparams, save_model,
                    save_qparams, scheme_from_attrs)
from .tensor import F32, I8RANGE, I32RANGE, Tensor

I32_MIN, I32_MAX = -(2 ** 31), 2 ** 31 - 1


@dataclasses.dataclass(frozen=True)
class RequantRecord:
    """Scale transition q_out = clip(round(m * value) + zero_point).

    ``multiplier`` is s_in/s_out in double precision, one entry per output
    channel when the producing accumulator is per-channel. It is None when
    the input scale is only known at run time (downstream of a global
    average pool, whose divisor is the spatial extent of the input).
    Power-of-two backends get an exactly representable m, so the double
    multiply is exact there.
    """

    in_scales: tuple
    out_scale: tuple
    zero_point: tuple
    multiplier: tuple
    qmin: int
    qmax: int


@dataclasses.dataclass(frozen=True)
class ConvPlan:
    """Integer program for one conv/linear node.

    The accumulator decomposes Σ (w̄-z_w)(x̄-z_x) + b̄ into a data term
    Σ (w̄-z_w)·x̄ and ``const`` = b̄ - z_x·Σ(w̄-z_w), which only depends
    on weights and is computed here, offline. Padding positions hold
    x̄ = z_x so the decomposition stays exact over the padded tensor.

    ``bias_levels`` keeps b̄ = round(b / (s_w·s_x)) separately from
    ``const`` so callers can reconstruct the deployed bias value
    s_w·s_x·b̄ — the form the integer program actually adds.
    """

    weight: np.ndarray       # int64 levels, I8RANGE values
    const: np.ndarray        # int64, one entry per output channel
    z_w: np.ndarray          # int64, len 1 or C_out
    z_x: int
    acc_scales: np.ndarray   # float64 s_w*s_x, len 1 or C_out
    stride: tuple
    padding: tuple
    groups: int
    linear: bool
    bias_levels: np.ndarray  # int64 b̄ per out channel (zeros if no bias)
    bias_name: object        # param name of the source bias, or None


@dataclasses.dataclass(frozen=True)
class QuantizedGraph:
    """Immutable integer program mirroring the source graph's topology."""

    graph: object                 # the fake-quantized source Graph
    plans: dict                   # node id -> ConvPlan / RequantRecord / dict
    qparams: dict

    @property
    def weights(self):
        return {nid: p.weight for nid, p in self.plans.items()
                if isinstance(p, ConvPlan)}


class _Rep:
    """A wire value during integer execution."""

    __slots__ = ("kind", "data", "scales", "zp", "qp")

    def __init__(self, kind, data, scales=None, zp=0, qp=None):
        self.kind = kind          # "f32" | "i8" | "acc"
        self.data = data          # float32 or int64 ndarray
        self.scales = scales      # float64 array, len 1 or C
        self.zp = zp
        self.qp = qp

    def dequantized(self):
        if self.kind == "f32":
            return Tensor(self.data)
        vals = (self.data - self.zp).astype(np.float64) \
            * _per_channel(self.scales, self.data.ndim)
        return Tensor(vals.astype(np.float32))


def _per_channel(scales, ndim):
    """Broadcast a per-channel scale vector along the channel axis."""
    if scales.size == 1:
        return float(scales[0])
    shape = [1] * ndim
    shape[1] = -1
    return scales.reshape(shape)


def _check_i32(arr, what):
    if arr.size and (arr.min() < I32_MIN or arr.max() > I32_MAX):
        raise AccumulatorOverflowError(
            f"{what}: values leave the INT32 range "
            f"[{I32_MIN}, {I32_MAX}] (max |value| = {np.abs(arr).max()})")
    return arr


def requantize(acc, record):
    """Rescale an accumulator (or level tensor) into an 8-bit grid.

    q = clip(round_half_to_even(m * acc) + zero_point, qmin, qmax); the
    multiplier is applied in double precision.
    """
    data = acc.data if isinstance(acc, Tensor) else np.asarray(acc)
    m = np.asarray(record.multiplier, dtype=np.float64)
    q = np.rint(_per_channel(m, data.ndim) * data.astype(np.float64)) \
        + record.zero_point[0]
    q = np.clip(q, record.qmin, record.qmax).astype(np.int64)
    return Tensor(q, I8RANGE) if isinstance(acc, Tensor) else q


# -- lowering ------------------------------------------------------------------


def _fq_key(node):
    return node.attrs.get("key", node.id)


def _weight_axis(node):
    scheme = scheme_from_attrs(node.attrs["scheme"])
    return 0 if scheme.granularity == qz.PER_CHANNEL else None


def _conv_plan(graph, n, wfq, x_qp, qparams):
    wkey = _fq_key(wfq)
    wqp = qparams[wkey]
    w = graph.params[wfq.attrs["param"]]
    wq = qz.quantize(w, wqp, axis=_weight_axis(wfq)).data.astype(np.int64)

    linear = n.op == "linear"
    cout = wq.shape[0]
    red_axes = tuple(range(1, wq.ndim))
    wsum = wq.sum(axis=red_axes)                       # Σw̄ per out channel
    k_red = int(np.prod(wq.shape[1:]))                 # reduction size
    z_w = np.asarray(wqp.zero_points, dtype=np.int64)
    z_x = int(x_qp.zero_points[0])
    s_w = np.asarray(wqp.scales, dtype=np.float64)
    acc_scales = s_w * float(x_qp.scales[0])

    bname = n.attrs.get("bias")
    if bname:
        b = graph.params[bname].data.astype(np.float64)
        s_b = acc_scales if acc_scales.size > 1 else acc_scales[0]
        b_int = np.rint(b / s_b)
        if np.abs(b_int).max() > I32_MAX:
            raise AccumulatorOverflowError(
                f"bias of {n.id!r} does not fit INT32 at scale s_w*s_x")
        b_int = b_int.astype(np.int64)
    else:
        b_int = np.zeros(cout, dtype=np.int64)

    const = b_int - z_x * wsum + k_red * z_w * z_x
    return ConvPlan(wq, const, z_w, z_x, acc_scales,
                    tuple(n.attrs.get("stride", (1, 1))),
                    tuple(n.attrs.get("padding", (0, 0))),
                    int(n.attrs.get("groups", 1)), linear,
                    b_int, bname)


def _make_record(in_scales, qp):
    m = None
    if in_scales is not None:
        m = tuple(np.asarray(in_scales, dtype=np.float64)
                  / np.asarray(qp.scales, dtype=np.float64))
    return RequantRecord(
        tuple(in_scales) if in_scales is not None else None,
        qp.scales, qp.zero_points, m, qp.qmin, qp.qmax)


def _align_target(graph, add_node, qparams):
    """The output quantizer an integer add aligns its operands to.

    Walks through order-preserving pointwise ops (relu/relu6), which are
    scale-transparent, until the wire hits a fake-quantize node.
    """
    cur = add_node.id
    seen = set()
    while True:
        consumers = [m for m in graph.nodes if cur in m.inputs]
        if len(consumers) != 1 or cur in seen:
            break
        seen.add(cur)
        c = consumers[0]
        if c.op == "fakequant":
            return qparams[_fq_key(c)]
        if c.op not in ("relu", "relu6"):
            break
        cur = c.id
    raise ValueError(
        f"add {add_node.id!r}: both inputs are quantized but no output "
        f"quantizer follows to define the shared scale")


def lower(graph, qparams):
    """Compile a calibrated, BN-folded fake-quant graph to integers."""
    for n in graph.nodes:
        if n.op == "bn" or "bn" in n.attrs:
            raise ValueError(
                f"node {n.id!r}: fold batch norm into static weights "
                f"(strategy 0) before lowering")
    if not graph.has_fakequant():
        raise ValueError("graph carries no quantizers; insert fake-quant "
                         "nodes and calibrate first")
    missing = sorted({_fq_key(n) for n in graph.nodes
                      if n.op == "fakequant"
                      and _fq_key(n) not in (qparams or {})})
    if missing:
        raise CalibrationRequiredError(missing)

    plans = {}
    reps = {}   # wire id -> ("f32",) | ("i8", qp) | ("acc", scales or None)

    def need_i8(nid, what):
        rep = reps.get(nid)
        if rep is None or rep[0] != "i8":
            raise CalibrationRequiredError([f"{what} (wire {nid!r})"])
        return rep[1]

    for n in graph.nodes:
        if n.op == "input":
            reps[n.id] = ("f32",)
        elif n.op == "fakequant":
            if "param" in n.attrs:
                continue    # weight quantizer, folded into its conv plan
            qp = qparams[_fq_key(n)]
            src = reps[n.inputs[0]]
            if src[0] == "f32":
                plans[n.id] = _make_record(None, qp)
            elif src[0] == "i8":
                plans[n.id] = _make_record(src[1].scales, qp)
            else:
                plans[n.id] = _make_record(src[1], qp)
            reps[n.id] = ("i8", qp)
        elif n.op in ("conv2d", "linear"):
            x_qp = need_i8(n.inputs[0], f"input of {n.id!r}")
            if len(n.inputs) != 2:
                raise CalibrationRequiredError([f"{n.id}:w"])
            wfq = graph.node(n.inputs[1])
            if wfq.op != "fakequant" or "param" not in wfq.attrs:
                raise CalibrationRequiredError([f"{n.id}:w"])
            plan = _conv_plan(graph, n, wfq, x_qp, qparams)
            plans[n.id] = plan
            reps[n.id] = ("acc", plan.acc_scales)
        elif n.op in ("relu", "relu6"):
            reps[n.id] = reps[n.inputs[0]]
        elif n.op == "gap":
            src = reps[n.inputs[0]]
            # divisor is the runtime spatial extent; scale resolved then
            reps[n.id] = src if src[0] == "f32" else ("acc", None)
        elif n.op == "concat":
            srcs = [reps[i] for i in n.inputs]
            if all(r[0] == "f32" for r in srcs):
                reps[n.id] = srcs[0]
            elif all(r[0] == "i8" for r in srcs) and len(
                    {(r[1].scales, r[1].zero_points) for r in srcs}) == 1:
                reps[n.id] = srcs[0]
            else:
                raise ValueError(
                    f"concat {n.id!r}: integer concat requires all inputs "
                    f"on one shared quantizer (hardware-preset insertion)")
        elif n.op == "add":
            a, b = (reps[i] for i in n.inputs)
            kinds = (a[0], b[0])
            if kinds == ("f32", "f32"):
                reps[n.id] = a
            elif "f32" in kinds:
                raise ValueError(
                    f"add {n.id!r}: cannot mix a float operand with a "
                    f"quantized one; quantize both or neither")
            elif kinds == ("i8", "i8"):
                target = _align_target(graph, n, qparams)
                plans[n.id] = {"mode": "align",
                               "record": _make_record(None, target)}
                reps[n.id] = ("i8", target)
            else:
                # one INT32 operand: the other rescales into its scale
                acc_ix = 0 if a[0] == "acc" else 1
                plans[n.id] = {"mode": "into-acc", "acc": acc_ix}
                reps[n.id] = (a, b)[acc_ix]
        else:
            raise ValueError(f"cannot lower op {n.op!r} (node {n.id!r})")

    return QuantizedGraph(graph, plans, dict(qparams))


# -- integer execution ---------------------------------------------------------


def _centered_weight(plan):
    """Weight levels with the weight zero point subtracted (int64)."""
    return plan.weight - plan.z_w.reshape((-1,) + (1,) * (plan.weight.ndim - 1))


def _conv_int(xq, plan):
    """INT32-accumulated convolution of level tensors (int64 math)."""
    acc = conv2d_int(xq, _centered_weight(plan), plan.stride, plan.padding,
                     plan.groups, plan.z_x)
    return acc + plan.const.reshape(1, -1, 1, 1)


def _linear_int(xq, plan):
    if xq.ndim == 4:
        if xq.shape[2:] != (1, 1):
            raise ShapeError(
                f"linear got a {xq.shape} input; only NC11 feature maps "
                f"can be flattened")
        xq = xq.reshape(xq.shape[0], xq.shape[1])
    acc = xq @ _centered_weight(plan).T
    return acc + plan.const.reshape(1, -1)


def _runtime_requant(rep, record, node_id):
    """Requantize any integer rep to the record's grid."""
    s_out = np.asarray(record.out_scale, dtype=np.float64)
    m = rep.scales / s_out
    val = rep.data - rep.zp if rep.kind == "i8" else rep.data
    q = np.rint(_per_channel(m, val.ndim) * val.astype(np.float64)) \
        + record.zero_point[0]
    return np.clip(q, record.qmin, record.qmax).astype(np.int64)


def _relu6_bound(rep):
    return np.rint(6.0 / rep.scales).astype(np.int64)


def _execute(qg, feeds):
    g = qg.graph
    values = {}
    for nid, t in feeds.items():
        if t.dtype != F32:
            raise ValueError("run_int takes F32 inputs and quantizes them "
                             "at the graph's first activation quantizer")
        values[nid] = _Rep("f32", t.data)

    for n in g.nodes:
        if n.op == "input":
            if n.id not in values:
                raise ValueError(f"missing feed for input {n.id!r}")
            continue
        if n.op == "fakequant":
            if "param" in n.attrs:
                continue
            rec = qg.plans[n.id]
            src = values[n.inputs[0]]
            if src.kind == "f32":
                qp = qg.qparams[_fq_key(n)]
                q = qz.quantize(Tensor(src.data), qp).data.astype(np.int64)
            else:
                q = _runtime_requant(src, rec, n.id)
            values[n.id] = _Rep(
                "i8", q, np.asarray(rec.out_scale, dtype=np.float64),
                int(rec.zero_point[0]), qg.qparams[_fq_key(n)])
        elif n.op in ("conv2d", "linear"):
            plan = qg.plans[n.id]
            x = values[n.inputs[0]]
            acc = _linear_int(x.data, plan) if plan.linear \
                else _conv_int(x.data, plan)
            _check_i32(acc, f"accumulator of {n.id!r}")
            values[n.id] = _Rep("acc", acc, plan.acc_scales)
        elif n.op == "relu":
            src = values[n.inputs[0]]
            if src.kind == "f32":
                values[n.id] = _Rep("f32", np.maximum(src.data, 0))
            else:
                floor = src.zp if src.kind == "i8" else 0
                values[n.id] = _Rep(src.kind, np.maximum(src.data, floor),
                                    src.scales, src.zp, src.qp)
        elif n.op == "relu6":
            src = values[n.inputs[0]]
            if src.kind == "f32":
                values[n.id] = _Rep(
                    "f32", np.clip(src.data, 0, 6).astype(np.float32))
            else:
                floor = src.zp if src.kind == "i8" else 0
                hi = _per_channel(_relu6_bound(src), src.data.ndim) + floor
                out = np.minimum(np.maximum(src.data, floor), hi)
                values[n.id] = _Rep(src.kind, out, src.scales, src.zp,
                                    src.qp)
        elif n.op == "gap":
            src = values[n.inputs[0]]
            if src.kind == "f32":
                values[n.id] = _Rep(
                    "f32", src.data.mean(axis=(2, 3), keepdims=True,
                                         dtype=np.float32))
            else:
                hw = src.data.shape[2] * src.data.shape[3]
                acc = (src.data - src.zp).sum(axis=(2, 3), keepdims=True,
                                              dtype=np.int64)
                _check_i32(acc, f"accumulator of {n.id!r}")
                values[n.id] = _Rep("acc", acc, src.scales / hw)
        elif n.op == "concat":
            srcs = [values[i] for i in n.inputs]
            data = np.concatenate([s.data for s in srcs],
                                  axis=n.attrs["axis"])
            f = srcs[0]
            values[n.id] = _Rep(f.kind, data, f.scales, f.zp, f.qp)
        elif n.op == "add":
            a, b = (values[i] for i in n.inputs)
            plan = qg.plans.get(n.id)
            if plan is None:                      # float add, pre-quant
                values[n.id] = _Rep("f32", a.data + b.data)
            elif plan["mode"] == "align":
                rec = plan["record"]
                s_out = np.asarray(rec.out_scale, dtype=np.float64)
                parts = []
                for r in (a, b):
                    lv = (r.data - r.zp).astype(np.float64) \
                        * _per_channel(r.scales / s_out, r.data.ndim)
                    parts.append(np.rint(lv).astype(np.int64))
                q = np.clip(parts[0] + parts[1] + rec.zero_point[0],
                            rec.qmin, rec.qmax)
                values[n.id] = _Rep(
                    "i8", q, s_out, int(rec.zero_point[0]), None)
            else:                                 # rescale into INT32 acc
                acc, other = (a, b) if plan["acc"] == 0 else (b, a)
                m = other.scales / acc.scales
                val = other.data - other.zp if other.kind == "i8" \
                    else other.data
                r = np.rint(_per_channel(m, val.ndim)
                            * val.astype(np.float64)).astype(np.int64)
                out = acc.data + r
                _check_i32(out, f"accumulator of {n.id!r}")
                values[n.id] = _Rep("acc", out, acc.scales)
        else:
            raise AssertionError(f"unhandled op {n.op}")
    return values


def run_int(qg, feeds):
    """Execute the integer program.

    ``feeds`` is {input-id: F32 Tensor} or a single Tensor for one-input
    graphs. Returns ({output-id: integer Tensor}, {output-id: F32 Tensor})
    — the raw integer outputs (I8RANGE levels, or I32RANGE accumulators
    for outputs that no quantizer follows) and their dequantization.
    Re-entrant: all state is local to the call.
    """
    g = qg.graph
    if isinstance(feeds, Tensor):
        if len(g.inputs) != 1:
            raise ValueError("graph has multiple inputs; pass a dict")
        feeds = {g.inputs[0]: feeds}
    values = _execute(qg, feeds)
    ints, deqs = {}, {}
    for out in g.outputs:
        rep = values[out]
        if rep.kind == "f32":
            ints[out] = None
        elif rep.kind == "i8":
            ints[out] = Tensor(rep.data, I8RANGE)
        else:
            ints[out] = Tensor(_check_i32(rep.data, f"output {out!r}"),
                               I32RANGE)
        deqs[out] = rep.dequantized()
    return ints, deqs


# -- fake vs. real comparison --------------------------------------------------


def _signature(graph):
    return [(n.id, n.op, tuple(n.inputs)) for n in graph.nodes]


def _recover_levels(fake, rep):
    """Map a fake-quantized F32 tensor back onto integer levels."""
    vals = fake.data.astype(np.float64) \
        / _per_channel(rep.scales, fake.data.ndim)
    return np.rint(vals).astype(np.int64) + rep.zp


def deployed_bias_graph(qg):
    """The fake-simulation graph with biases in their deployed form.

    The integer program stores each bias as b̄ = round(b / (s_w·s_x)), so
    the value a deployed model adds is s_w·s_x·b̄, not the original float.
    Replaying the fake simulation with these round-tripped biases makes
    the two paths add literally the same bias, leaving only the
    FP32-vs-INT arithmetic disparity between them.
    """
    updates = {}
    for plan in qg.plans.values():
        if isinstance(plan, ConvPlan) and plan.bias_name:
            b = plan.acc_scales * plan.bias_levels.astype(np.float64)
            updates[plan.bias_name] = Tensor(b.astype(np.float32))
    return qg.graph.with_params(updates) if updates else qg.graph


# -- serialization ---------------------------------------------------------


QUANTIZED_FORMAT = "qlower-quantized"


def _floats(xs):
    return None if xs is None else [float(x) for x in xs]


def _record_to_json(rec):
    return {"in_scales": _floats(rec.in_scales),
            "out_scale": _floats(rec.out_scale),
            "zero_point": [int(z) for z in rec.zero_point],
            "multiplier": _floats(rec.multiplier),
            "qmin": rec.qmin, "qmax": rec.qmax}


def _record_from_json(path, obj):
    try:
        return RequantRecord(
            None if obj["in_scales"] is None else tuple(obj["in_scales"]),
            tuple(obj["out_scale"]),
            tuple(obj["zero_point"]),
            None if obj["multiplier"] is None else tuple(obj["multiplier"]),
            int(obj["qmin"]), int(obj["qmax"]))
    except (KeyError, TypeError) as e:
        raise SchemaError(f"{path}: bad requantization record ({e})") \
            from None


def _plan_to_json(plan):
    if isinstance(plan, RequantRecord):
        return dict(_record_to_json(plan), kind="requant")
    if isinstance(plan, ConvPlan):
        return {"kind": "conv",
                "weight_shape": list(plan.weight.shape),
                "weight": [int(v) for v in plan.weight.ravel()],
                "const": [int(v) for v in plan.const],
                "z_w": [int(v) for v in plan.z_w],
                "z_x": plan.z_x,
                "acc_scales": _floats(plan.acc_scales),
                "stride": list(plan.stride),
                "padding": list(plan.padding),
                "groups": plan.groups,
                "linear": plan.linear,
                "bias_levels": [int(v) for v in plan.bias_levels],
                "bias_name": plan.bias_name}
    if plan["mode"] == "align":
        return {"kind": "add-align",
                "record": _record_to_json(plan["record"])}
    return {"kind": "add-into-acc", "acc": plan["acc"]}


def _plan_from_json(path, obj):
    if not isinstance(obj, dict) or "kind" not in obj:
        raise SchemaError(f"{path}: plan must be an object with a kind")
    kind = obj["kind"]
    if kind == "requant":
        return _record_from_json(path, obj)
    if kind == "add-align":
        return {"mode": "align",
                "record": _record_from_json(f"{path}.record", obj["record"])}
    if kind == "add-into-acc":
        return {"mode": "into-acc", "acc": int(obj["acc"])}
    if kind != "conv":
        raise SchemaError(f"{path}.kind: unknown plan kind {kind!r}")
    try:
        w = np.asarray(obj["weight"], dtype=np.int64) \
            .reshape(obj["weight_shape"])
        return ConvPlan(
            w, np.asarray(obj["const"], dtype=np.int64),
            np.asarray(obj["z_w"], dtype=np.int64), int(obj["z_x"]),
            np.asarray(obj["acc_scales"], dtype=np.float64),
            tuple(obj["stride"]), tuple(obj["padding"]),
            int(obj["groups"]), bool(obj["linear"]),
            np.asarray(obj["bias_levels"], dtype=np.int64),
            obj["bias_name"])
    except (KeyError, TypeError, ValueError) as e:
        raise SchemaError(f"{path}: bad conv plan ({e})") from None


def save_quantized(qg):
    """Serialize a QuantizedGraph to canonical JSON bytes."""
    doc = {"format": QUANTIZED_FORMAT, "version": 1,
           "model": json.loads(save_model(qg.graph).decode("utf-8")),
           "qparams": json.loads(save_qparams(qg.qparams).decode("utf-8")),
           "plans": {nid: _plan_to_json(p) for nid, p in qg.plans.items()}}
    return json.dumps(doc, sort_keys=True, separators=(",", ":")).encode()


def load_quantized(data):
    """Rebuild a QuantizedGraph from :func:`save_quantized` output."""
    if isinstance(data, (bytes, bytearray)):
        data = data.decode("utf-8")
    try:
        doc = json.loads(data)
    except json.JSONDecodeError as e:
        raise SchemaError(f"$: invalid JSON ({e.msg} at char {e.pos})") \
            from None
    if not isinstance(doc, dict) or doc.get("format") != QUANTIZED_FORMAT:
        raise SchemaError(f"$.format: expected {QUANTIZED_FORMAT!r}")
    for key in ("model", "qparams", "plans"):
        if key not in doc:
            raise SchemaError(f"$: missing field {key!r}")
    graph = load_model(json.dumps(doc["model"]))
    qparams = load_qparams(json.dumps(doc["qparams"]))
    plans = {nid: _plan_from_json(f"$.plans.{nid}", obj)
             for nid, obj in doc["plans"].items()}
    return QuantizedGraph(graph, plans, qparams)


def compare_fake_real(graph, qg, inputs):
    """Pair the fake-quantize simulation against integer execution.

    Returns {"per_layer": [{"id", "max_level_diff", "bitexact_frac"}...],
    "final": {"max_level_diff", "bitexact_frac", "cosine"}} aggregated
    over the dataset, comparing integer levels at every activation
    quantizer and at the final outputs.

    The fake side runs with deployed-form biases (see
    :func:`deployed_bias_graph`): both paths then add the identical bias
    and every remaining level difference is rounding disparity between
    float simulation and integer arithmetic. Final level metrics cover
    8-bit outputs only — an output that no quantizer follows is an INT32
    accumulator whose grid is too fine to recover from a float trace, so
    such outputs contribute to ``cosine`` but not to the level stats
    (``max_level_diff`` is None when no output is 8-bit).
    """
    if _signature(graph) != _signature(qg.graph):
        raise ValueError("topology mismatch: the fake and lowered graphs "
                         "must come from the same calibrated model")
    inputs = list(inputs)
    if not inputs:
        raise EmptyDatasetError("comparison dataset is empty")
    fake_graph = deployed_bias_graph(qg)

    act_fqs = [n.id for n in graph.nodes
               if n.op == "fakequant" and "param" not in n.attrs]
    layer = {fid: {"max": 0, "same": 0, "count": 0} for fid in act_fqs}
    final = {"max": 0, "same": 0, "count": 0, "dot": 0.0,
             "na": 0.0, "nb": 0.0}

    for x in inputs:
        feeds = {graph.inputs[0]: x} if isinstance(x, Tensor) else x
        _, rt = infer(fake_graph, dict(feeds), qg.qparams)
        values = _execute(qg, dict(feeds))
        for fid in act_fqs:
            q_fake = _recover_levels(rt.trace[fid], values[fid])
            q_real = values[fid].data
            row = layer[fid]
            row["max"] = max(row["max"],
                             int(np.abs(q_fake - q_real).max()))
            row["same"] += int((q_fake == q_real).sum())
            row["count"] += q_fake.size
        for out in graph.outputs:
            rep = values[out]
            fake = rt.trace[out]
            real = rep.dequantized()
            if rep.kind == "i8":
                q_fake = _recover_levels(fake, rep)
                final["max"] = max(final["max"],
                                   int(np.abs(q_fake - rep.data).max()))
                final["same"] += int((q_fake == rep.data).sum())
                final["count"] += q_fake.size
            a = fake.data.astype(np.float64).ravel()
            b = real.data.astype(np.float64).ravel()
            final["dot"] += float(a @ b)
            final["na"] += float(a @ a)
            final["nb"] += float(b @ b)

    denom = np.sqrt(final["na"] * final["nb"])
    return {
        "per_layer": [
            {"id": fid,
             "max_level_diff": layer[fid]["max"],
             "bitexact_frac": layer[fid]["same"] / layer[fid]["count"]}
            for fid in act_fqs],
        "final": {
            "max_level_diff": (final["max"] if final["count"] else None),
            "bitexact_frac": (final["same"] / final["count"]
                              if final["count"] else None),
            "cosine": float(final["dot"] / denom) if denom else 1.0,
        },
    }
