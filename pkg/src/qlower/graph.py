"""Computation-graph IR: serialization, execution, fake-quant insertion,
and batch-norm folding.

A graph is an ordered list of nodes in topological order; each node
produces exactly one value named by its node id. Parameters (weights,
biases, BN statistics) live in a name -> Tensor table and are referenced
from node attributes, so transforms can rewrite them without touching
graph structure. Graphs are immutable; every transform returns a new one.
"""

import base64
import json
from concurrent import futures

import numpy as np

from . import calibration as cal
from . import quantizer as qz
from . import tensor as T
from .errors import (CalibrationRequiredError, EmptyDatasetError, SchemaError,
                     ShapeError)
from .quantizer import QScheme
from .tensor import F32, I8RANGE, I32RANGE, Tensor

OPS = ("conv2d", "linear", "bn", "relu", "relu6", "add", "concat", "gap",
       "fakequant", "input")
KERNELS = ("fixed", "lsq", "lsq+", "pact", "dorefa", "dsq")
_DTYPE_NAMES = {F32: "f32", I8RANGE: "i8", I32RANGE: "i32"}
_DTYPE_BY_NAME = {"f32": F32, "i8": I8RANGE, "i32": I32RANGE}


class Node:
    __slots__ = ("id", "op", "attrs", "inputs")

    def __init__(self, id, op, attrs=None, inputs=()):
        self.id = str(id)
        self.op = op
        self.attrs = dict(attrs or {})
        self.inputs = tuple(inputs)

    def __eq__(self, other):
        return isinstance(other, Node) and \
            (self.id, self.op, self.attrs, self.inputs) == \
            (other.id, other.op, other.attrs, other.inputs)

    def __repr__(self):
        return f"Node({self.id!r}, {self.op!r}, inputs={list(self.inputs)})"


class Graph:
    def __init__(self, nodes, params, inputs, outputs):
        self.nodes = tuple(nodes)
        self.params = dict(params)
        self.inputs = tuple(inputs)
        self.outputs = tuple(outputs)
        self._by_id = {n.id: n for n in self.nodes}
        self._validate()

    def node(self, nid):
        return self._by_id[nid]

    def consumers(self, nid):
        return [n for n in self.nodes if nid in n.inputs]

    def __eq__(self, other):
        if not isinstance(other, Graph):
            return NotImplemented
        if (self.nodes, self.inputs, self.outputs) != \
                (other.nodes, other.inputs, other.outputs):
            return False
        if self.params.keys() != other.params.keys():
            return False
        return all(self.params[k].dtype == other.params[k].dtype and
                   np.array_equal(self.params[k].data, other.params[k].data)
                   for k in self.params)

    # -- validation ----------------------------------------------------------

    def _err(self, path, msg):
        raise SchemaError(f"{path}: {msg}")

    def _param(self, path, name, ndim=None):
        t = self.params.get(name)
        if t is None:
            self._err(path, f"parameter {name!r} not found")
        if ndim is not None and t.ndim != ndim:
            self._err(path, f"parameter {name!r} must be {ndim}-d, "
                            f"got shape {t.shape}")
        return t

    def _validate(self):
        seen = set()
        for i, n in enumerate(self.nodes):
            path = f"$.nodes[{i}]"
            if n.op not in OPS:
                self._err(path + ".op", f"unknown op {n.op!r} on node {n.id!r}")
            if n.id in seen:
                self._err(path + ".id", f"duplicate node id {n.id!r}")
            for j, ref in enumerate(n.inputs):
                if ref not in seen:
                    self._err(f"{path}.inputs[{j}]",
                              f"reference to {ref!r} before its definition")
            seen.add(n.id)
            self._validate_node(path, n)
        for j, nid in enumerate(tuple(self.inputs) + tuple(self.outputs)):
            where = "inputs" if j < len(self.inputs) else "outputs"
            if nid not in self._by_id:
                self._err(f"$.{where}", f"unknown node id {nid!r}")
        for nid in self.inputs:
            if self._by_id[nid].op != "input":
                self._err("$.inputs", f"{nid!r} is not an input node")

    def _validate_node(self, path, n):
        arity = {"bn": 1, "relu": 1, "relu6": 1, "add": 2, "gap": 1,
                 "input": 0}
        if n.op in arity and len(n.inputs) != arity[n.op]:
            self._err(path, f"{n.op} expects {arity[n.op]} inputs, "
                            f"got {len(n.inputs)}")
        if n.op in ("conv2d", "linear"):
            if len(n.inputs) not in (1, 2):
                self._err(path, f"{n.op} expects 1 input (plus an optional "
                                f"quantized-weight value), got {len(n.inputs)}")
            w = self._param(path, n.attrs.get("weight"),
                            ndim=4 if n.op == "conv2d" else 2)
            bias = n.attrs.get("bias")
            if bias is not None:
                b = self._param(path, bias, ndim=1)
                if b.shape[0] != w.shape[0]:
                    self._err(path, f"bias length {b.shape[0]} does not match "
                                    f"{w.shape[0]} output channels")
            bn = n.attrs.get("bn")
            if bn is not None:
                for key in ("gamma", "beta", "mean", "var"):
                    self._param(path, bn.get(key), ndim=1)
                if not float(bn.get("eps", 1e-5)) > 0:
                    self._err(path, "bn eps must be > 0")
        elif n.op == "bn":
            for key in ("gamma", "beta", "mean", "var"):
                self._param(path, n.attrs.get(key), ndim=1)
            if not float(n.attrs.get("eps", 1e-5)) > 0:
                self._err(path, "bn eps must be > 0")
        elif n.op == "concat":
            if not n.inputs:
                self._err(path, "concat needs at least one input")
            if not isinstance(n.attrs.get("axis"), int):
                self._err(path, "concat needs an integer axis attribute")
        elif n.op == "fakequant":
            has_param = "param" in n.attrs
            if has_param == (len(n.inputs) == 1):
                self._err(path, "fakequant takes exactly one input value "
                                "or a 'param' attribute, not both")
            if has_param:
                self._param(path, n.attrs["param"])
            kern = n.attrs.get("kernel", "fixed")
            if kern not in KERNELS:
                self._err(path, f"unknown quantizer kernel {kern!r}")
            if "scheme" not in n.attrs:
                self._err(path, "fakequant needs a scheme attribute")

    # -- rebuilding helpers --------------------------------------------------

    def with_params(self, updates):
        """New graph with some parameter tensors replaced."""
        params = dict(self.params)
        params.update(updates)
        return Graph(self.nodes, params, self.inputs, self.outputs)

    def has_fakequant(self):
        return any(n.op == "fakequant" or "wq" in n.attrs
                   for n in self.nodes)


# -- scheme <-> attrs --------------------------------------------------------

def scheme_to_attrs(s):
    return {"bits": s.bitwidth, "symmetry": s.symmetry,
            "granularity": s.granularity, "axis": s.axis,
            "scale_form": s.scale_form, "signedness": s.signedness}


def scheme_from_attrs(a):
    return QScheme(a["bits"], a["symmetry"], a["granularity"], a["axis"],
                   a["scale_form"], a["signedness"])


# -- serialization -----------------------------------------------------------

def _tensor_to_json(t):
    data = np.ascontiguousarray(t.data)
    if data.dtype.byteorder == ">":
        data = data.astype(data.dtype.newbyteorder("<"))
    return {"shape": list(t.shape), "dtype": _DTYPE_NAMES[t.dtype],
            "data_b64": base64.b64encode(data.tobytes()).decode("ascii")}


def _tensor_from_json(path, obj):
    if not isinstance(obj, dict):
        raise SchemaError(f"{path}: tensor must be an object")
    extra = set(obj) - {"shape", "dtype", "data_b64"}
    if extra:
        raise SchemaError(f"{path}: unknown field {sorted(extra)[0]!r}")
    for key in ("shape", "dtype", "data_b64"):
        if key not in obj:
            raise SchemaError(f"{path}: missing field {key!r}")
    dtype = _DTYPE_BY_NAME.get(obj["dtype"])
    if dtype is None:
        raise SchemaError(f"{path}.dtype: unknown dtype {obj['dtype']!r}")
    np_dtype = np.dtype("<f4") if dtype == F32 else np.dtype("<i4")
    try:
        raw = base64.b64decode(obj["data_b64"], validate=True)
    except Exception:
        raise SchemaError(f"{path}.data_b64: invalid base64") from None
    shape = obj["shape"]
    if not (isinstance(shape, list) and
            all(isinstance(d, int) and d > 0 for d in shape)):
        raise SchemaError(f"{path}.shape: must be a list of positive ints")
    want = int(np.prod(shape)) * 4 if shape else 4
    if len(raw) != want:
        raise SchemaError(f"{path}.data_b64: expected {want} bytes for shape "
                          f"{shape}, got {len(raw)}")
    arr = np.frombuffer(raw, dtype=np_dtype).reshape(shape)
    return Tensor(arr.astype(np_dtype.newbyteorder("=")), dtype)


def save_model(graph):
    doc = {
        "version": 1,
        "inputs": list(graph.inputs),
        "outputs": list(graph.outputs),
        "nodes": [{"id": n.id, "op": n.op, "attrs": n.attrs,
                   "inputs": list(n.inputs)} for n in graph.nodes],
        "params": {k: _tensor_to_json(v)
                   for k, v in sorted(graph.params.items())},
    }
    return json.dumps(doc, sort_keys=True, separators=(",", ":")).encode()


def _expect(path, obj, typ, what):
    if not isinstance(obj, typ):
        raise SchemaError(f"{path}: {what}")
    return obj


def load_model(data):
    if isinstance(data, (bytes, bytearray)):
        data = data.decode("utf-8")
    try:
        doc = json.loads(data)
    except json.JSONDecodeError as e:
        raise SchemaError(f"$: invalid JSON ({e.msg} at char {e.pos})") \
            from None
    _expect("$", doc, dict, "model must be a JSON object")
    extra = set(doc) - {"version", "inputs", "outputs", "nodes", "params"}
    if extra:
        raise SchemaError(f"$: unknown field {sorted(extra)[0]!r}")
    for key in ("version", "inputs", "outputs", "nodes", "params"):
        if key not in doc:
            raise SchemaError(f"$: missing field {key!r}")
    if doc["version"] != 1:
        raise SchemaError(f"$.version: unsupported version {doc['version']!r}")
    _expect("$.inputs", doc["inputs"], list, "must be a list")
    _expect("$.outputs", doc["outputs"], list, "must be a list")
    _expect("$.nodes", doc["nodes"], list, "must be a list")
    _expect("$.params", doc["params"], dict, "must be an object")

    nodes = []
    for i, nd in enumerate(doc["nodes"]):
        path = f"$.nodes[{i}]"
        _expect(path, nd, dict, "node must be an object")
        extra = set(nd) - {"id", "op", "attrs", "inputs"}
        if extra:
            raise SchemaError(f"{path}: unknown field {sorted(extra)[0]!r}")
        for key in ("id", "op"):
            if key not in nd:
                raise SchemaError(f"{path}: missing field {key!r}")
        _expect(f"{path}.id", nd["id"], str, "must be a string")
        _expect(f"{path}.op", nd["op"], str, "must be a string")
        attrs = nd.get("attrs", {})
        _expect(f"{path}.attrs", attrs, dict, "must be an object")
        inputs = nd.get("inputs", [])
        _expect(f"{path}.inputs", inputs, list, "must be a list")
        for j, ref in enumerate(inputs):
            _expect(f"{path}.inputs[{j}]", ref, str, "must be a string")
        nodes.append(Node(nd["id"], nd["op"], attrs, inputs))

    params = {k: _tensor_from_json(f"$.params.{k}", v)
              for k, v in doc["params"].items()}
    return Graph(nodes, params, doc["inputs"], doc["outputs"])


# -- qparams sidecar ---------------------------------------------------------

def save_qparams(qparams):
    doc = {key: {"scales": [float(s) for s in qp.scales],
                 "zero_points": [int(z) for z in qp.zero_points],
                 "qmin": qp.qmin, "qmax": qp.qmax,
                 "scale_form": qp.scale_form}
           for key, qp in qparams.items()}
    return json.dumps(doc, sort_keys=True, separators=(",", ":")).encode()


def load_qparams(data):
    if isinstance(data, (bytes, bytearray)):
        data = data.decode("utf-8")
    try:
        doc = json.loads(data)
    except json.JSONDecodeError as e:
        raise SchemaError(f"$: invalid JSON ({e.msg} at char {e.pos})") \
            from None
    _expect("$", doc, dict, "qparams must be a JSON object")
    out = {}
    for key, obj in doc.items():
        path = f"$.{key}"
        _expect(path, obj, dict, "entry must be an object")
        extra = set(obj) - {"scales", "zero_points", "qmin", "qmax",
                            "scale_form"}
        if extra:
            raise SchemaError(f"{path}: unknown field {sorted(extra)[0]!r}")
        try:
            out[key] = qz.QParams(tuple(obj["scales"]),
                                  tuple(obj["zero_points"]),
                                  obj["qmin"], obj["qmax"],
                                  obj.get("scale_form", "fp32"))
        except (KeyError, TypeError, ValueError) as e:
            raise SchemaError(f"{path}: {e}") from None
    return out


# -- execution ---------------------------------------------------------------

def _axis_or_none(scheme):
    return scheme.axis if scheme.granularity == qz.PER_CHANNEL else None


class _Runtime:
    """One forward pass over a graph.

    mode:
      eval    - fake-quantize at every quantizer, BN uses running stats
      train   - as eval plus tape recording, batch statistics, EMA updates
      recal   - quantizers active, every BN site measures batch statistics
      observe - quantizers pass through and feed observers
      fp32    - quantizers pass through (plain float semantics)
    """

    def __init__(self, graph, qparams=None, mode="eval", tape=None,
                 observers=None, state=None, quant_fn=None):
        if mode not in ("eval", "train", "recal", "observe", "fp32"):
            raise ValueError(f"unknown mode {mode!r}")
        self.g = graph
        self.qparams = qparams or {}
        self.mode = mode
        self.tape = tape
        self.observers = observers if observers is not None else {}
        # mutable parameter overlay: trained weights, updated BN stats
        self.state = state if state is not None else dict(graph.params)
        self.quant_fn = quant_fn  # QAT kernel hook, installed by trainers
        self.bn_batch_stats = {}  # node id -> (mean, var) from this pass

    def param(self, name):
        return self.state[name]

    @staticmethod
    def _fq_key(node):
        return node.attrs.get("key", node.id)

    def quantize_value(self, key, scheme, x, kernel="fixed"):
        if self.mode in ("observe", "fp32"):
            if self.mode == "observe" and key in self.observers:
                self.observers[key].observe(x)
            return x
        qp = self.qparams.get(key)
        if qp is None:
            raise CalibrationRequiredError([key])
        axis = _axis_or_none(scheme)
        if self.mode == "train" and self.quant_fn is not None:
            return self.quant_fn(key, scheme, qp, x, axis, kernel, self.tape)
        out = qz.fake_quantize(x, qp, axis)
        if self.mode == "train" and self.tape is not None:
            # straight-through estimator, gated to the clip range
            z = np.asarray(qp.zero_points, dtype=np.float64)
            s = np.asarray(qp.scales, dtype=np.float64)
            if axis is not None:
                shp = [1] * x.ndim
                shp[axis] = -1
                z, s = z.reshape(shp), s.reshape(shp)
            v = x.data.astype(np.float64) / s + z
            mask = ((v > qp.qmin) & (v < qp.qmax)).astype(np.float32)
            self.tape.record(out, (x,), lambda g: (g * mask,))
        return out

    def run(self, feeds):
        values = {}
        for nid, t in feeds.items():
            if nid not in self.g._by_id or self.g.node(nid).op != "input":
                raise ValueError(f"feed {nid!r} is not a graph input")
            if t.dtype != F32:
                raise ShapeError("graph inputs must be F32 tensors")
            values[nid] = t
        for n in self.g.nodes:
            if n.op == "input":
                if n.id not in values:
                    raise ValueError(f"missing feed for input {n.id!r}")
                continue
            values[n.id] = self._eval_node(n, values)
        self.trace = values  # per-node values, for paired-path comparison
        return {nid: values[nid] for nid in self.g.outputs}

    def _eval_node(self, n, values):
        ins = [values[i] for i in n.inputs]
        if n.op == "fakequant":
            scheme = scheme_from_attrs(n.attrs["scheme"])
            src = ins[0] if ins else self.param(n.attrs["param"])
            return self.quantize_value(self._fq_key(n), scheme, src,
                                       n.attrs.get("kernel", "fixed"))
        if n.op == "conv2d":
            return self._conv_like(n, ins, linear=False)
        if n.op == "linear":
            return self._conv_like(n, ins, linear=True)
        if n.op == "bn":
            return self._bn(n, ins[0])
        if n.op == "relu":
            return T.relu(ins[0], self.tape)
        if n.op == "relu6":
            return T.relu6(ins[0], self.tape)
        if n.op == "add":
            return T.add(ins[0], ins[1], self.tape)
        if n.op == "concat":
            return T.concat(ins, n.attrs["axis"], self.tape)
        if n.op == "gap":
            return T.global_avg_pool(ins[0], self.tape)
        raise AssertionError(f"unhandled op {n.op}")

    # -- conv / linear with optional folded BN -------------------------------

    def _apply_conv(self, n, x, w, b, linear):
        if linear:
            if x.ndim == 4:
                # pooled NC11 feature maps flatten into linear features
                if x.shape[2:] != (1, 1):
                    raise ShapeError(
                        f"linear {n.id!r} got a {x.shape} input; only "
                        f"NC11 feature maps can be flattened")
                old = x.shape
                flat = Tensor(x.data.reshape(old[0], old[1]))
                if self.tape is not None:
                    self.tape.record(flat, (x,),
                                     lambda g: (g.reshape(old),))
                x = flat
            return T.linear(x, w, b, self.tape)
        stride = tuple(n.attrs.get("stride", (1, 1)))
        padding = tuple(n.attrs.get("padding", (0, 0)))
        groups = n.attrs.get("groups", 1)
        return T.conv2d(x, w, b, stride, padding, groups, self.tape)

    def _weight_quant(self, n, w):
        wq = n.attrs.get("wq")
        if wq is None:
            return w
        scheme = scheme_from_attrs(wq["scheme"])
        return self.quantize_value(wq.get("key", n.id + ":w"), scheme, w,
                                   wq.get("kernel", "fixed"))

    def _mul_channels(self, t, coef):
        """t * per-output-channel constant, taped."""
        shape = [1] * t.ndim
        shape[1 if t.ndim == 4 else -1] = -1
        c = coef.reshape(shape).astype(np.float32)
        out = Tensor(t.data * c)
        if self.tape is not None:
            self.tape.record(out, (t,), lambda g: (g * c,))
        return out

    def _conv_like(self, n, ins, linear):
        x = ins[0]
        w = ins[1] if len(ins) == 2 else self.param(n.attrs["weight"])
        bname = n.attrs.get("bias")
        b = self.param(bname) if bname else None
        bn = n.attrs.get("bn")
        if bn is None:
            if len(ins) != 2:
                w = self._weight_quant(n, w)
            return self._apply_conv(n, x, w, b, linear)
        return self._folded_bn_conv(n, x, w, b, bn, linear)

    def _bn_arrays(self, bn):
        return (self.param(bn["gamma"]), self.param(bn["beta"]),
                self.param(bn["mean"]), self.param(bn["var"]),
                float(bn.get("eps", 1e-5)))

    @staticmethod
    def _batch_stats_of(y, linear):
        axes = (0,) if linear else (0, 2, 3)
        yd = y.data.astype(np.float64)
        return yd.mean(axis=axes), yd.var(axis=axes)

    def _fold_weights(self, w, coef, gamma_t=None, dcoef=None):
        """w * per-channel coef; gradients reach w and, if given, gamma
        through dcoef = d(coef)/d(gamma)."""
        shape = [-1] + [1] * (w.ndim - 1)
        cb = coef.reshape(shape).astype(np.float32)
        wf = Tensor(w.data * cb)
        if self.tape is not None:
            wd = w.data.astype(np.float64)
            dc = None if dcoef is None else dcoef.reshape(shape)

            def bwd(g):
                dw = g * cb
                if gamma_t is None:
                    return (dw,)
                axes = tuple(range(1, w.ndim))
                dgamma = (g.astype(np.float64) * wd * dc).sum(axis=axes)
                return dw, dgamma.astype(np.float32)
            srcs = (w,) if gamma_t is None else (w, gamma_t)
            self.tape.record(wf, srcs, bwd)
        return wf

    def _fold_bias(self, beta, gamma, b_t, b0, mean, sig):
        """beta + (b - mean) * gamma / sig, with gradients to beta, gamma,
        and the conv bias when present."""
        coef = (b0 - mean) / sig
        gcoef = gamma.data.astype(np.float64) / sig
        val = beta.data.astype(np.float64) + \
            coef * gamma.data.astype(np.float64)
        bf = Tensor(val.astype(np.float32))
        if self.tape is not None:
            srcs = (beta, gamma) if b_t is None else (beta, gamma, b_t)

            def bwd(g):
                g64 = g.astype(np.float64)
                out = [g, (g64 * coef).astype(np.float32)]
                if b_t is not None:
                    out.append((g64 * gcoef).astype(np.float32))
                return tuple(out)
            self.tape.record(bf, srcs, bwd)
        return bf

    def _bias_add(self, y, b, linear):
        shape = (1, -1) if linear else (1, -1, 1, 1)
        out = Tensor(y.data + b.data.reshape(shape))
        if self.tape is not None:
            axes = (0,) if linear else (0, 2, 3)
            self.tape.record(out, (y, b), lambda g: (g, g.sum(axis=axes)))
        return out

    def _folded_bn_conv(self, n, x, w, b, bn, linear):
        strategy = int(bn.get("strategy", 1))
        gamma, beta, mean, var, eps = self._bn_arrays(bn)
        momentum = float(bn.get("momentum", 0.1))
        g64 = gamma.data.astype(np.float64)
        sig_run = np.sqrt(var.data.astype(np.float64) + eps)
        b0 = b.data.astype(np.float64) if b is not None else 0.0
        if self.mode == "recal":
            strategy = 4  # measure true batch statistics at every BN site

        if self.mode not in ("train", "recal") or strategy == 1:
            # running-statistic fold; at eval every strategy takes this form
            coef = g64 / sig_run
            train1 = self.mode == "train"
            wf = self._fold_weights(w, coef,
                                    gamma_t=gamma if train1 else None,
                                    dcoef=1.0 / sig_run if train1 else None)
            wf = self._weight_quant(n, wf)
            bf = self._fold_bias(beta, gamma, b, b0,
                                 mean.data.astype(np.float64), sig_run)
            return self._apply_conv(n, x, wf, bf, linear)

        if strategy == 2:
            # plain conv measures this batch's statistics, then a second
            # conv runs with the quantized batch-stat fold
            y1 = self._apply_conv(n, x, w, None, linear)
            bmean, bvar = self._batch_stats_of(y1, linear)
            bmean = bmean + b0
            sig_b = np.sqrt(bvar + eps)
            self._note_bn_update(n.id, bn, bmean, bvar, momentum)
            coef = g64 / sig_b  # batch stats enter as detached constants
            wf = self._weight_quant(
                n, self._fold_weights(w, coef, gamma_t=gamma,
                                      dcoef=1.0 / sig_b))
            bf = self._fold_bias(beta, gamma, b, b0, bmean, sig_b)
            return self._apply_conv(n, x, wf, bf, linear)

        if strategy == 3:
            # quantize the stable running-stat fold, then rescale the output
            # by sigma_run/sigma_batch so training sees batch normalization
            y1 = self._apply_conv(n, x, w, None, linear)
            bmean, bvar = self._batch_stats_of(y1, linear)
            bmean = bmean + b0
            sig_b = np.sqrt(bvar + eps)
            self._note_bn_update(n.id, bn, bmean, bvar, momentum)
            coef = g64 / sig_run
            wf = self._weight_quant(
                n, self._fold_weights(w, coef, gamma_t=gamma,
                                      dcoef=1.0 / sig_run))
            y = self._apply_conv(n, x, wf, None, linear)
            y = self._mul_channels(y, sig_run / sig_b)
            bf = self._fold_bias(beta, gamma, b, b0, bmean, sig_b)
            return self._bias_add(y, bf, linear)

        if strategy == 4:
            # quantized running-fold conv, un-scale, then an explicit
            # batch-stat BN; the sigma/gamma factors cancel at inference
            coef = g64 / sig_run
            wf = self._weight_quant(n, self._fold_weights(w, coef))
            y = self._apply_conv(n, x, wf, None, linear)
            y = self._mul_channels(y, sig_run / g64)
            if b is not None:
                y = self._bias_add(y, b, linear)
            y4 = self._as4d(y, linear)
            yn, bmean, bvar = T.batchnorm(y4, gamma, beta, mean, var, eps,
                                          "train", momentum, tape=self.tape)
            self._note_bn_update(n.id, bn, bmean.data.astype(np.float64),
                                 bvar.data.astype(np.float64), momentum)
            return self._from4d(yn, linear, y)
        raise ValueError(f"unknown BN folding strategy {strategy}")

    def _as4d(self, y, linear):
        if not linear:
            return y
        out = Tensor(y.data.reshape(y.shape[0], y.shape[1], 1, 1))
        if self.tape is not None:
            self.tape.record(out, (y,), lambda g: (g.reshape(y.shape),))
        return out

    def _from4d(self, yn, linear, orig):
        if not linear:
            return yn
        out = Tensor(yn.data.reshape(orig.shape))
        if self.tape is not None:
            self.tape.record(out, (yn,), lambda g: (g.reshape(yn.shape),))
        return out

    def _note_bn_update(self, nid, bn, bmean, bvar, momentum):
        self.bn_batch_stats[nid] = (bmean, bvar)
        if self.mode == "train":
            self.state[bn["mean"]] = T.ema_update(
                self.state[bn["mean"]], Tensor(bmean.astype(np.float32)),
                momentum)
            self.state[bn["var"]] = T.ema_update(
                self.state[bn["var"]], Tensor(bvar.astype(np.float32)),
                momentum)

    def _bn(self, n, x):
        gamma, beta, _, _, eps = self._bn_arrays(n.attrs)
        momentum = float(n.attrs.get("momentum", 0.1))
        mode = "train" if self.mode in ("train", "recal") else "infer"
        rm, rv = self.param(n.attrs["mean"]), self.param(n.attrs["var"])
        y, bmean, bvar = T.batchnorm(x, gamma, beta, rm, rv, eps, mode,
                                     momentum, tape=self.tape)
        if mode == "train":
            self._note_bn_update(n.id, n.attrs,
                                 bmean.data.astype(np.float64),
                                 bvar.data.astype(np.float64), momentum)
        return y

    def quantizer_keys(self):
        """All (key, scheme, weight-source) quantization points.

        weight-source is None for activations, a parameter name for
        standalone weight quantizers, and ("bn-fold", node-id) for
        quantizers folded inside a conv.
        """
        out = []
        for n in self.g.nodes:
            if n.op == "fakequant":
                out.append((self._fq_key(n),
                            scheme_from_attrs(n.attrs["scheme"]),
                            n.attrs.get("param")))
            wq = n.attrs.get("wq")
            if wq is not None:
                out.append((wq.get("key", n.id + ":w"),
                            scheme_from_attrs(wq["scheme"]),
                            ("bn-fold", n.id)))
        return out


def infer(graph, feeds, qparams=None, mode="eval", tape=None, observers=None,
          state=None, quant_fn=None):
    """Run the graph. ``feeds`` is {input-id: Tensor}, or a single Tensor
    when the graph has exactly one input. Returns ({output-id: Tensor},
    runtime); the runtime carries updated state and batch statistics."""
    if isinstance(feeds, Tensor):
        if len(graph.inputs) != 1:
            raise ValueError("graph has multiple inputs; pass a dict")
        feeds = {graph.inputs[0]: feeds}
    rt = _Runtime(graph, qparams, mode, tape, observers, state, quant_fn)
    return rt.run(feeds), rt


# -- fake-quant insertion ------------------------------------------------------

def _conv_depth(graph, nid, cache):
    """Number of conv/linear nodes on the deepest path ending at nid."""
    if nid in cache:
        return cache[nid]
    n = graph.node(nid)
    base = max((_conv_depth(graph, i, cache) for i in n.inputs), default=0)
    cache[nid] = base + (1 if n.op in ("conv2d", "linear") else 0)
    return cache[nid]


def residual_input(graph, add_node):
    """Which input of an add is the residual (conv-path) side.

    The side with the deeper conv chain counts as residual; a
    ``residual_input`` attribute overrides the heuristic.
    """
    override = add_node.attrs.get("residual_input")
    if override is not None:
        if override not in add_node.inputs:
            raise SchemaError(
                f"$.nodes[{add_node.id}].attrs.residual_input: "
                f"{override!r} is not an input of this add")
        return override
    cache = {}
    a, b = add_node.inputs
    return b if _conv_depth(graph, b, cache) > _conv_depth(graph, a, cache) \
        else a


def insert_fake_quant(graph, preset, bits=None, kernel="fixed"):
    """Place fake-quantize nodes according to the preset's graph policy.

    graph1 quantizes each conv/linear input edge separately (plus, for
    hardware presets, concat inputs as a shared-scale group). graph2
    quantizes whole wires feeding compute ops and graph outputs but keeps
    the residual path of each add unquantized, so exactly one add input
    arrives quantized. graph3 additionally quantizes every add input.
    ``kernel`` tags every inserted quantizer with a training behavior.
    """
    if graph.has_fakequant():
        raise ValueError("graph already carries fake-quant nodes")
    if kernel not in KERNELS:
        raise ValueError(f"unknown quantizer kernel {kernel!r}")
    wt = preset.weight if bits is None else preset.weight.with_bits(bits)
    act = preset.activation if bits is None \
        else preset.activation.with_bits(bits)
    if act.granularity == qz.PER_CHANNEL:
        raise ValueError(
            f"preset {preset.name!r}: per-channel quantization is "
            f"weight-only, activations must be per-tensor")
    policy = preset.graph_policy
    academic = preset.name == "academic"

    act_attrs = scheme_to_attrs(act)
    edge_nodes = []   # (producer id, fq Node) for per-edge quantizers
    rewire = {}       # (consumer id, value id) -> fq id
    wire_fq = {}      # value id -> fq id (all consumers rewired)
    residual_skip = set()  # (add id, value id) edges that stay unquantized

    def fq_node(fid, src, key=None):
        attrs = {"scheme": act_attrs, "kernel": kernel}
        if key is not None:
            attrs["key"] = key
        return Node(fid, "fakequant", attrs, [src])

    def concat_groups():
        # all inputs of a concat share one set of quantization parameters,
        # realized as per-edge quantizers resolving to a single key
        for n in graph.nodes:
            if n.op != "concat":
                continue
            key = f"fq:{n.id}:cat"
            for src in dict.fromkeys(n.inputs):
                fid = f"fq:{src}:{n.id}"
                edge_nodes.append((src, fq_node(fid, src, key=key)))
                rewire[(n.id, src)] = fid

    if policy == "graph1":
        for n in graph.nodes:
            if n.op in ("conv2d", "linear"):
                src = n.inputs[0]
                fid = f"fq:{src}:{n.id}"
                edge_nodes.append((src, fq_node(fid, src)))
                rewire[(n.id, src)] = fid
        if not academic:
            concat_groups()
    elif policy in ("graph2", "graph3"):
        quantized = set()

        def mark(v):
            if v not in quantized:
                quantized.add(v)
                wire_fq[v] = f"fq:{v}"

        for n in graph.nodes:
            if n.op == "add" and policy == "graph2":
                residual_skip.add((n.id, residual_input(graph, n)))
        for n in graph.nodes:
            if n.op in ("conv2d", "linear", "gap"):
                mark(n.inputs[0])
            elif n.op == "add":
                for src in n.inputs:
                    if (n.id, src) not in residual_skip:
                        mark(src)
        for v in graph.outputs:
            mark(v)
        concat_groups()
        for v, fid in wire_fq.items():
            edge_nodes.append((v, fq_node(fid, v)))
    else:
        raise ValueError(f"unknown graph policy {policy!r}")

    # weight quantizers: plain convs get a standalone fakequant node between
    # the parameter and the conv; BN-carrying convs re-fold every step, so
    # their quantizer lives inside the node and sees the folded weight
    weight_nodes = {}
    wq_attr = {}
    for n in graph.nodes:
        if n.op not in ("conv2d", "linear"):
            continue
        if "bn" in n.attrs:
            wq_attr[n.id] = {"scheme": scheme_to_attrs(wt),
                             "key": f"{n.id}:w", "kernel": kernel}
        else:
            weight_nodes[n.id] = Node(
                f"{n.id}:w", "fakequant",
                {"scheme": scheme_to_attrs(wt), "kernel": kernel,
                 "param": n.attrs["weight"]}, [])

    by_src = {}
    for src, fq in edge_nodes:
        by_src.setdefault(src, []).append(fq)

    out_nodes = []
    for n in graph.nodes:
        wn = weight_nodes.get(n.id)
        if wn is not None:
            out_nodes.append(wn)
        inputs = []
        for src in n.inputs:
            fid = rewire.get((n.id, src))
            if fid is None and (n.id, src) not in residual_skip:
                fid = wire_fq.get(src)
            inputs.append(fid if fid is not None else src)
        if wn is not None:
            inputs.append(wn.id)
        attrs = n.attrs
        if n.id in wq_attr:
            attrs = dict(attrs)
            attrs["wq"] = wq_attr[n.id]
        out_nodes.append(Node(n.id, n.op, attrs, inputs))
        for fq in by_src.get(n.id, ()):
            out_nodes.append(fq)

    outputs = [wire_fq.get(v, v) for v in graph.outputs]
    return Graph(out_nodes, graph.params, graph.inputs, outputs)


# -- batch-norm folding --------------------------------------------------------

def fold_eq4(w, b, gamma, beta, mean, var, eps):
    """Folded (weight, bias) from frozen statistics."""
    coef = gamma.astype(np.float64) / np.sqrt(var.astype(np.float64) + eps)
    shape = [-1] + [1] * (w.ndim - 1)
    w_fold = (w.astype(np.float64) * coef.reshape(shape)).astype(np.float32)
    b0 = b.astype(np.float64) if b is not None else 0.0
    b_fold = (beta.astype(np.float64) +
              (b0 - mean.astype(np.float64)) * coef).astype(np.float32)
    return w_fold, b_fold


def fold_bn(graph, strategy=0):
    """Fold every conv->bn pair according to the chosen strategy.

    Strategy 0 bakes running statistics into new weight/bias parameters and
    deletes the BN node. Strategies 1-4 absorb the BN into the conv node,
    which then folds on the fly each forward pass (differing in how batch
    statistics enter during training); all take the strategy-0 form at
    inference.
    """
    if strategy not in (0, 1, 2, 3, 4):
        raise ValueError(f"unknown BN folding strategy {strategy}")
    pairs = {}  # bn node id -> conv node
    for n in graph.nodes:
        if n.op != "bn":
            continue
        src = graph.node(n.inputs[0])
        if src.op not in ("conv2d", "linear"):
            raise SchemaError(
                f"$.nodes[{n.id}]: bn must directly follow conv2d or "
                f"linear, found {src.op!r}")
        if len(graph.consumers(src.id)) != 1:
            raise SchemaError(
                f"$.nodes[{n.id}]: conv output {src.id!r} has other "
                f"consumers; folding would change them")
        if not float(n.attrs.get("eps", 1e-5)) > 0:
            raise SchemaError(f"$.nodes[{n.id}]: bn eps must be > 0")
        pairs[n.id] = src

    if not pairs:
        return graph

    params = dict(graph.params)
    rename = {}    # bn id -> conv id, for consumer rewiring
    replaced = {}  # conv id -> replacement Node
    drop = set()
    retarget = {}  # old weight param -> folded weight param (strategy 0)

    for bn_id, conv in pairs.items():
        bn = graph.node(bn_id)
        rename[bn_id] = conv.id
        drop.add(bn_id)
        attrs = dict(conv.attrs)
        inputs = conv.inputs
        if strategy == 0:
            w = params[attrs["weight"]]
            b = params[attrs["bias"]] if attrs.get("bias") else None
            wf, bf = fold_eq4(
                w.data, None if b is None else b.data,
                params[bn.attrs["gamma"]].data, params[bn.attrs["beta"]].data,
                params[bn.attrs["mean"]].data, params[bn.attrs["var"]].data,
                float(bn.attrs.get("eps", 1e-5)))
            wname, bname = conv.id + ".wfold", conv.id + ".bfold"
            params[wname], params[bname] = Tensor(wf), Tensor(bf)
            retarget[attrs["weight"]] = wname
            attrs["weight"], attrs["bias"] = wname, bname
        else:
            attrs["bn"] = {"gamma": bn.attrs["gamma"],
                           "beta": bn.attrs["beta"],
                           "mean": bn.attrs["mean"],
                           "var": bn.attrs["var"],
                           "eps": float(bn.attrs.get("eps", 1e-5)),
                           "momentum": float(bn.attrs.get("momentum", 0.1)),
                           "strategy": strategy}
            if len(conv.inputs) == 2:
                # absorb the standalone weight quantizer: folding re-derives
                # the weight every step, so quantization must follow it
                wfq = graph.node(conv.inputs[1])
                attrs["wq"] = {"scheme": wfq.attrs["scheme"],
                               "key": wfq.attrs.get("key", wfq.id),
                               "kernel": wfq.attrs.get("kernel", "fixed")}
                drop.add(wfq.id)
                inputs = conv.inputs[:1]
        replaced[conv.id] = Node(conv.id, conv.op, attrs, inputs)

    out_nodes = []
    for n in graph.nodes:
        if n.id in drop:
            continue
        n = replaced.get(n.id, n)
        attrs = n.attrs
        if n.op == "fakequant" and attrs.get("param") in retarget:
            attrs = dict(attrs)
            attrs["param"] = retarget[attrs["param"]]
        inputs = tuple(rename.get(i, i) for i in n.inputs)
        out_nodes.append(Node(n.id, n.op, attrs, inputs))
    outputs = tuple(rename.get(v, v) for v in graph.outputs)
    return _prune_params(Graph(out_nodes, params, graph.inputs, outputs))


def _prune_params(graph):
    used = set()
    for n in graph.nodes:
        for key in ("weight", "bias", "param", "gamma", "beta", "mean",
                    "var"):
            v = n.attrs.get(key)
            if isinstance(v, str):
                used.add(v)
        bn = n.attrs.get("bn")
        if bn:
            used.update(bn[k] for k in ("gamma", "beta", "mean", "var"))
    params = {k: v for k, v in graph.params.items() if k in used}
    return Graph(graph.nodes, params, graph.inputs, graph.outputs)


def to_inference_form(graph, state=None):
    """Collapse on-the-fly folded convs (strategies 1-4) to baked form."""
    params = dict(graph.params)
    if state is not None:
        params.update(state)
    out_nodes = []
    for n in graph.nodes:
        bn = n.attrs.get("bn")
        if n.op not in ("conv2d", "linear") or bn is None:
            out_nodes.append(n)
            continue
        w = params[n.attrs["weight"]]
        b = params[n.attrs["bias"]] if n.attrs.get("bias") else None
        wf, bf = fold_eq4(w.data, None if b is None else b.data,
                          params[bn["gamma"]].data, params[bn["beta"]].data,
                          params[bn["mean"]].data, params[bn["var"]].data,
                          float(bn["eps"]))
        attrs = {k: v for k, v in n.attrs.items() if k != "bn"}
        wname, bname = n.id + ".wfold", n.id + ".bfold"
        params[wname], params[bname] = Tensor(wf), Tensor(bf)
        attrs["weight"], attrs["bias"] = wname, bname
        out_nodes.append(Node(n.id, n.op, attrs, n.inputs))
    return _prune_params(Graph(out_nodes, params, graph.inputs,
                               graph.outputs))


# -- calibration over a graph ------------------------------------------------

_CALIB = {
    "minmax": ("minmax", cal.calib_minmax),
    "quantile": ("quantile", cal.calib_quantile),
    "mse": ("mse", cal.calib_mse),
    "kld": ("kld", cal.calib_kld),
    "norm": ("norm", cal.calib_norm),
    "meanstd": ("meanstd", cal.calib_meanstd),
}

CALIB_METHODS = tuple(_CALIB)


def folded_weight(graph, node, params=None):
    """The running-statistics folded weight a bn-carrying conv quantizes."""
    params = params if params is not None else graph.params
    bn = node.attrs["bn"]
    w = params[node.attrs["weight"]]
    coef = params[bn["gamma"]].data.astype(np.float64) / \
        np.sqrt(params[bn["var"]].data.astype(np.float64) + float(bn["eps"]))
    shape = [-1] + [1] * (w.ndim - 1)
    return (w.data * coef.reshape(shape)).astype(np.float32)


def calibrate(graph, batches, act_calib="minmax", wt_calib="minmax",
              act_args=None, wt_args=None, threads=1):
    """Observe a dataset and resolve QParams for every quantization point.

    Activations are observed through a plain FP32 forward pass; weights are
    observed directly from the parameter table (folded weights for convs
    carrying a BN). Returns {key: QParams}; fake-quant nodes that share a
    key (concat groups) come out sharing one entry.

    ``threads`` > 1 splits the dataset into contiguous shards observed in
    parallel and merges the shard observers in shard order, so the result
    is deterministic for a given thread count.
    """
    for name in (act_calib, wt_calib):
        if name not in _CALIB:
            raise ValueError(f"unknown calibration method {name!r}; "
                             f"choose from {', '.join(_CALIB)}")
    if threads < 1:
        raise ValueError(f"threads must be >= 1, got {threads}")
    batches = list(batches)
    if not batches:
        raise EmptyDatasetError("calibration dataset is empty")

    points = _Runtime(graph).quantizer_keys()
    act_kind, act_fn = _CALIB[act_calib]
    wt_kind, wt_fn = _CALIB[wt_calib]

    def fresh_observers():
        obs = {}
        for key, scheme, src in points:
            if src is None and key not in obs:
                obs[key] = cal.Observer(
                    act_kind, norm_p=(act_args or {}).get("p", 2))
        return obs

    def observe(chunk, obs):
        for batch in chunk:
            infer(graph, batch, mode="observe", observers=obs)
        return obs

    observers = fresh_observers()
    if threads > 1 and len(batches) > 1:
        chunks = [c for c in
                  np.array_split(np.arange(len(batches)), threads)
                  if c.size]
        with futures.ThreadPoolExecutor(max_workers=len(chunks)) as pool:
            shards = list(pool.map(
                lambda idx: observe([batches[i] for i in idx],
                                    fresh_observers()),
                chunks))
        for shard in shards:
            for key, obs in shard.items():
                observers[key].merge(obs)
    else:
        observe(batches, observers)

    qparams = {}
    for key, scheme, src in points:
        if key in qparams:
            continue
        if src is None:
            qparams[key] = act_fn(observers[key], scheme, **(act_args or {}))
            continue
        wdata = folded_weight(graph, graph.node(src[1])) \
            if isinstance(src, tuple) else graph.params[src].data
        obs = cal.Observer(wt_kind, channel_axis=_axis_or_none(scheme),
                           norm_p=(wt_args or {}).get("p", 2))
        obs.observe(wdata)
        qparams[key] = wt_fn(obs, scheme, **(wt_args or {}))
    return qparams


def recalibrate_bn_stats(graph, batches, qparams=None):
    """Refresh BN running statistics from forward passes of the (possibly
    quantized) graph; each running stat becomes the plain average of the
    per-batch statistics. Returns a new graph."""
    batches = list(batches)
    if not batches:
        raise EmptyDatasetError("recalibration dataset is empty")

    stat_params = {}
    for n in graph.nodes:
        bn = n.attrs if n.op == "bn" else n.attrs.get("bn")
        if bn is not None and "mean" in bn:
            stat_params[n.id] = (bn["mean"], bn["var"])
    if not stat_params:
        return graph

    if graph.has_fakequant() and qparams is None:
        missing = [k for k, _, _ in _Runtime(graph).quantizer_keys()]
        raise CalibrationRequiredError(missing)
    sums = {}
    for batch in batches:
        _, rt = infer(graph, batch, qparams=qparams, mode="recal",
                      state=dict(graph.params))
        for nid, (m, v) in rt.bn_batch_stats.items():
            acc = sums.setdefault(nid, [0.0, 0.0, 0])
            acc[0] = acc[0] + m
            acc[1] = acc[1] + v
            acc[2] += 1

    updates = {}
    for nid, (msum, vsum, k) in sums.items():
        mname, vname = stat_params[nid]
        updates[mname] = Tensor((msum / k).astype(np.float32))
        updates[vname] = Tensor((vsum / k).astype(np.float32))
    return graph.with_params(updates)
