"""Graph IR: serialization, fake-quant placement, BN folding, execution."""

import json

import numpy as np
import pytest

from qlower import graph as G
from qlower import quantizer as qz
from qlower import tensor as T
from qlower.errors import (CalibrationRequiredError, EmptyDatasetError,
                           SchemaError)
from qlower.graph import Graph, Node
from qlower.tensor import Tape, Tensor, backward


def t32(a):
    return Tensor(np.asarray(a, dtype=np.float32))


def rand_t(rng, *shape):
    return Tensor(rng.standard_normal(shape).astype(np.float32))


def chain_graph(rng, cin=3, cmid=4, classes=5):
    """input -> conv -> relu -> conv -> gap -> linear."""
    nodes = [
        Node("in", "input"),
        Node("c1", "conv2d", {"weight": "c1.w", "bias": "c1.b",
                              "stride": [1, 1], "padding": [1, 1],
                              "groups": 1}, ["in"]),
        Node("r1", "relu", {}, ["c1"]),
        Node("c2", "conv2d", {"weight": "c2.w", "bias": None,
                              "stride": [2, 2], "padding": [0, 0],
                              "groups": 1}, ["r1"]),
        Node("p", "gap", {}, ["c2"]),
        Node("fc", "linear", {"weight": "fc.w", "bias": "fc.b"}, ["p"]),
    ]
    params = {"c1.w": rand_t(rng, cmid, cin, 3, 3),
              "c1.b": rand_t(rng, cmid),
              "c2.w": rand_t(rng, cmid, cmid, 3, 3),
              "fc.w": rand_t(rng, classes, cmid),
              "fc.b": rand_t(rng, classes)}
    return Graph(nodes, params, ["in"], ["fc"])


def bn_params(rng, c, tag):
    return {f"g{tag}": Tensor((np.abs(rng.standard_normal(c)) + 0.5)
                              .astype(np.float32)),
            f"be{tag}": rand_t(rng, c),
            f"m{tag}": rand_t(rng, c),
            f"v{tag}": Tensor((np.abs(rng.standard_normal(c)) + 0.5)
                              .astype(np.float32))}


def bn_attrs(tag, eps=1e-5):
    return {"gamma": f"g{tag}", "beta": f"be{tag}", "mean": f"m{tag}",
            "var": f"v{tag}", "eps": eps, "momentum": 0.1}


def block_graph(rng, c=4, downsample=False):
    """Residual basic block: two conv+bn on the main path, identity or
    1x1-conv shortcut, elementwise add, trailing relu."""
    nodes = [
        Node("in", "input"),
        Node("c1", "conv2d", {"weight": "w1", "bias": None,
                              "stride": [1, 1], "padding": [1, 1],
                              "groups": 1}, ["in"]),
        Node("n1", "bn", bn_attrs(1), ["c1"]),
        Node("r1", "relu", {}, ["n1"]),
        Node("c2", "conv2d", {"weight": "w2", "bias": None,
                              "stride": [1, 1], "padding": [1, 1],
                              "groups": 1}, ["r1"]),
        Node("n2", "bn", bn_attrs(2), ["c2"]),
    ]
    params = {"w1": rand_t(rng, c, c, 3, 3), "w2": rand_t(rng, c, c, 3, 3)}
    params.update(bn_params(rng, c, 1))
    params.update(bn_params(rng, c, 2))
    short = "in"
    if downsample:
        nodes.append(Node("cd", "conv2d", {"weight": "wd", "bias": None,
                                           "stride": [1, 1],
                                           "padding": [0, 0], "groups": 1},
                          ["in"]))
        params["wd"] = rand_t(rng, c, c, 1, 1)
        short = "cd"
    nodes.append(Node("add", "add", {}, ["n2", short]))
    nodes.append(Node("r2", "relu", {}, ["add"]))
    return Graph(nodes, params, ["in"], ["r2"])


def concat_graph(rng, c=4):
    """Two conv branches joined by a channel concat, then a 1x1 conv."""
    nodes = [
        Node("in", "input"),
        Node("ca", "conv2d", {"weight": "wa", "bias": None, "stride": [1, 1],
                              "padding": [0, 0], "groups": 1}, ["in"]),
        Node("ra", "relu", {}, ["ca"]),
        Node("cb", "conv2d", {"weight": "wb", "bias": None, "stride": [1, 1],
                              "padding": [0, 0], "groups": 1}, ["in"]),
        Node("rb", "relu", {}, ["cb"]),
        Node("cat", "concat", {"axis": 1}, ["ra", "rb"]),
        Node("cc", "conv2d", {"weight": "wc", "bias": None, "stride": [1, 1],
                              "padding": [0, 0], "groups": 1}, ["cat"]),
    ]
    params = {"wa": rand_t(rng, c, c, 1, 1), "wb": rand_t(rng, c, c, 1, 1),
              "wc": rand_t(rng, c, 2 * c, 1, 1)}
    return Graph(nodes, params, ["in"], ["cc"])


def bottleneck_graph(rng, c=4, expand=8):
    """Inverted bottleneck: 1x1 expand, 3x3 depthwise, 1x1 project,
    each conv followed by bn, relu6 on the first two, residual add."""
    nodes = [
        Node("in", "input"),
        Node("c1", "conv2d", {"weight": "w1", "bias": None, "stride": [1, 1],
                              "padding": [0, 0], "groups": 1}, ["in"]),
        Node("n1", "bn", bn_attrs(1), ["c1"]),
        Node("h1", "relu6", {}, ["n1"]),
        Node("c2", "conv2d", {"weight": "w2", "bias": None, "stride": [1, 1],
                              "padding": [1, 1], "groups": expand}, ["h1"]),
        Node("n2", "bn", bn_attrs(2), ["c2"]),
        Node("h2", "relu6", {}, ["n2"]),
        Node("c3", "conv2d", {"weight": "w3", "bias": None, "stride": [1, 1],
                              "padding": [0, 0], "groups": 1}, ["h2"]),
        Node("n3", "bn", bn_attrs(3), ["c3"]),
        Node("add", "add", {}, ["n3", "in"]),
    ]
    params = {"w1": rand_t(rng, expand, c, 1, 1),
              "w2": rand_t(rng, expand, 1, 3, 3),
              "w3": rand_t(rng, c, expand, 1, 1)}
    for i, ch in (("1", expand), ("2", expand), ("3", c)):
        params.update(bn_params(rng, ch, i))
    return Graph(nodes, params, ["in"], ["add"])


def fp32_out(graph, x):
    outs, _ = G.infer(graph, x, mode="fp32")
    return outs[graph.outputs[0]].data


# ---------------------------------------------------------------------------
# serialization
# ---------------------------------------------------------------------------

class TestSerde:
    def test_round_trip_minimal(self):
        rng = np.random.default_rng(10)
        g = chain_graph(rng)
        blob = G.save_model(g)
        g2 = G.load_model(blob)
        assert g2 == g

    def test_save_is_deterministic_and_stable(self):
        rng = np.random.default_rng(11)
        g = block_graph(rng)
        blob = G.save_model(g)
        assert G.save_model(g) == blob
        assert G.save_model(G.load_model(blob)) == blob

    def test_param_bytes_preserved(self):
        rng = np.random.default_rng(12)
        g = chain_graph(rng)
        g2 = G.load_model(G.save_model(g))
        for k in g.params:
            assert g2.params[k].data.tobytes() == g.params[k].data.tobytes()

    def test_unknown_op_reports_path_and_node(self):
        doc = {"version": 1, "inputs": ["in"], "outputs": ["x"],
               "nodes": [{"id": "in", "op": "input", "attrs": {},
                          "inputs": []},
                         {"id": "x", "op": "conv3d", "attrs": {},
                          "inputs": ["in"]}],
               "params": {}}
        with pytest.raises(SchemaError) as e:
            G.load_model(json.dumps(doc))
        assert "$.nodes[1].op" in str(e.value)
        assert "'x'" in str(e.value)

    def test_unknown_fields_rejected(self):
        base = {"version": 1, "inputs": ["in"], "outputs": ["in"],
                "nodes": [{"id": "in", "op": "input", "attrs": {},
                           "inputs": []}],
                "params": {}}
        doc = dict(base, flavor="spicy")
        with pytest.raises(SchemaError, match=r"\$: unknown field 'flavor'"):
            G.load_model(json.dumps(doc))
        doc = json.loads(json.dumps(base))
        doc["nodes"][0]["color"] = "red"
        with pytest.raises(SchemaError,
                           match=r"\$\.nodes\[0\]: unknown field 'color'"):
            G.load_model(json.dumps(doc))

    def test_bad_version(self):
        doc = {"version": 2, "inputs": [], "outputs": [], "nodes": [],
               "params": {}}
        with pytest.raises(SchemaError, match=r"\$\.version"):
            G.load_model(json.dumps(doc))

    def test_tensor_payload_errors(self):
        def model_with(tensor_obj):
            return json.dumps({
                "version": 1, "inputs": ["in"], "outputs": ["c"],
                "nodes": [
                    {"id": "in", "op": "input", "attrs": {}, "inputs": []},
                    {"id": "c", "op": "conv2d",
                     "attrs": {"weight": "w", "bias": None},
                     "inputs": ["in"]}],
                "params": {"w": tensor_obj}})
        ok = {"shape": [1, 1, 1, 1], "dtype": "f32",
              "data_b64": "AACAPw=="}  # 1.0f
        G.load_model(model_with(ok))
        bad64 = dict(ok, data_b64="!!!")
        with pytest.raises(SchemaError, match=r"\$\.params\.w\.data_b64"):
            G.load_model(model_with(bad64))
        short = dict(ok, shape=[2, 1, 1, 1])
        with pytest.raises(SchemaError, match="expected 8 bytes"):
            G.load_model(model_with(short))
        odd = dict(ok, dtype="f64")
        with pytest.raises(SchemaError, match="unknown dtype"):
            G.load_model(model_with(odd))
        extra = dict(ok, layout="nchw")
        with pytest.raises(SchemaError, match="unknown field 'layout'"):
            G.load_model(model_with(extra))

    def test_graph_structure_errors(self):
        w = t32(np.ones((1, 1, 1, 1)))
        with pytest.raises(SchemaError, match="before its definition"):
            Graph([Node("a", "relu", {}, ["b"]), Node("b", "input")],
                  {}, ["b"], ["a"])
        with pytest.raises(SchemaError, match="duplicate node id"):
            Graph([Node("a", "input"), Node("a", "input")], {}, ["a"], ["a"])
        with pytest.raises(SchemaError, match="parameter 'w' not found"):
            Graph([Node("in", "input"),
                   Node("c", "conv2d", {"weight": "w", "bias": None},
                        ["in"])], {}, ["in"], ["c"])
        with pytest.raises(SchemaError, match="bias length"):
            Graph([Node("in", "input"),
                   Node("c", "conv2d", {"weight": "w", "bias": "b"},
                        ["in"])],
                  {"w": w, "b": t32(np.ones(3))}, ["in"], ["c"])
        with pytest.raises(SchemaError, match="not an input node"):
            Graph([Node("in", "input"), Node("r", "relu", {}, ["in"])],
                  {}, ["r"], ["r"])

    def test_qparams_sidecar_round_trip(self):
        qp = {"a": qz.QParams((0.1,), (0,), -128, 127),
              "w": qz.QParams((0.5, 0.25), (0, 0), -128, 127, "pot")}
        blob = G.save_qparams(qp)
        back = G.load_qparams(blob)
        assert back.keys() == qp.keys()
        for k in qp:
            assert back[k] == qp[k]
        assert G.save_qparams(back) == blob
        with pytest.raises(SchemaError, match="unknown field"):
            G.load_qparams(json.dumps({"a": {"scales": [1.0],
                                             "zero_points": [0],
                                             "qmin": 0, "qmax": 255,
                                             "extra": 1}}))


class TestFuzzRoundTrip:
    """Randomized DAGs exercise the full schema surface."""

    @staticmethod
    def random_graph(rng, n_nodes=50):
        nodes = [Node("v0", "input")]
        params = {}
        # pool of available values with their channel counts (spatial size
        # is kept uniform so add/concat stay shape-compatible)
        pool = [("v0", 3)]
        for i in range(1, n_nodes):
            nid = f"v{i}"
            kind = rng.choice(["conv", "relu", "relu6", "bn", "add",
                               "concat"], p=[.35, .15, .1, .15, .15, .1])
            src, c = pool[int(rng.integers(len(pool)))]
            if kind == "conv":
                out_c = int(rng.integers(1, 6))
                k = int(rng.choice([1, 3]))
                params[f"{nid}.w"] = rand_t(rng, out_c, c, k, k)
                attrs = {"weight": f"{nid}.w", "bias": None,
                         "stride": [1, 1], "padding": [k // 2, k // 2],
                         "groups": 1}
                if rng.random() < 0.5:
                    params[f"{nid}.b"] = rand_t(rng, out_c)
                    attrs["bias"] = f"{nid}.b"
                nodes.append(Node(nid, "conv2d", attrs, [src]))
                pool.append((nid, out_c))
            elif kind in ("relu", "relu6"):
                nodes.append(Node(nid, kind, {}, [src]))
                pool.append((nid, c))
            elif kind == "bn":
                for suffix, val in (("g", None), ("be", None), ("m", None),
                                    ("v", None)):
                    arr = rng.standard_normal(c).astype(np.float32)
                    if suffix in ("g", "v"):
                        arr = np.abs(arr) + np.float32(0.5)
                    params[f"{nid}.{suffix}"] = Tensor(arr)
                nodes.append(Node(nid, "bn",
                                  {"gamma": f"{nid}.g", "beta": f"{nid}.be",
                                   "mean": f"{nid}.m", "var": f"{nid}.v",
                                   "eps": 1e-5, "momentum": 0.1}, [src]))
                pool.append((nid, c))
            elif kind == "add":
                mates = [(v, cc) for v, cc in pool if cc == c]
                other = mates[int(rng.integers(len(mates)))][0]
                nodes.append(Node(nid, "add", {}, [src, other]))
                pool.append((nid, c))
            else:  # concat
                k = int(rng.integers(2, 4))
                picks = [pool[int(rng.integers(len(pool)))]
                         for _ in range(k)]
                nodes.append(Node(nid, "concat", {"axis": 1},
                                  [v for v, _ in picks]))
                pool.append((nid, sum(cc for _, cc in picks)))
        out = pool[-1][0]
        return Graph(nodes, params, ["v0"], [out])

    @pytest.mark.parametrize("seed", range(8))
    def test_fuzz_round_trip(self, seed):
        rng = np.random.default_rng(1000 + seed)
        g = self.random_graph(rng)
        blob = G.save_model(g)
        g2 = G.load_model(blob)
        assert g2 == g
        assert G.save_model(g2) == blob
        x = rand_t(rng, 2, 3, 6, 6)
        y1 = fp32_out(g, x)
        y2 = fp32_out(g2, x)
        assert np.array_equal(y1, y2)


# ---------------------------------------------------------------------------
# execution
# ---------------------------------------------------------------------------

class TestExecution:
    def test_plain_graph_matches_composed_ops(self):
        rng = np.random.default_rng(20)
        g = chain_graph(rng)
        x = rand_t(rng, 2, 3, 8, 8)
        got = fp32_out(g, x)
        h = T.conv2d(x, g.params["c1.w"], g.params["c1.b"], (1, 1), (1, 1))
        h = T.relu(h)
        h = T.conv2d(h, g.params["c2.w"], None, (2, 2), (0, 0))
        h = T.global_avg_pool(h)
        h = Tensor(h.data.reshape(h.shape[0], h.shape[1]))
        h = T.linear(h, g.params["fc.w"], g.params["fc.b"])
        assert np.array_equal(got.reshape(h.shape), h.data)

    def test_eval_equals_fp32_without_quantizers(self):
        rng = np.random.default_rng(21)
        g = block_graph(rng)
        x = rand_t(rng, 2, 4, 8, 8)
        a, _ = G.infer(g, x, mode="eval")
        b, _ = G.infer(g, x, mode="fp32")
        assert np.array_equal(a["r2"].data, b["r2"].data)

    def test_missing_qparams_raises(self):
        rng = np.random.default_rng(22)
        g = G.insert_fake_quant(chain_graph(rng),
                                qz.backend_preset("academic"))
        with pytest.raises(CalibrationRequiredError):
            G.infer(g, rand_t(rng, 1, 3, 8, 8))

    def test_quantized_inference_deterministic(self):
        rng = np.random.default_rng(23)
        g = G.insert_fake_quant(chain_graph(rng),
                                qz.backend_preset("academic"))
        x = rand_t(rng, 2, 3, 8, 8)
        qp = G.calibrate(g, [x])
        y1, _ = G.infer(g, x, qp)
        y2, _ = G.infer(g, x, qp)
        assert np.array_equal(y1["fc"].data, y2["fc"].data)

    def test_single_conv_error_bound(self):
        """8-bit fake quantization of one conv stays inside the bound
        implied by per-element rounding intervals."""
        rng = np.random.default_rng(24)
        w = rand_t(rng, 5, 3, 3, 3)
        g = Graph([Node("in", "input"),
                   Node("c", "conv2d", {"weight": "w", "bias": None,
                                        "stride": [1, 1], "padding": [0, 0],
                                        "groups": 1}, ["in"])],
                  {"w": w}, ["in"], ["c"])
        gq = G.insert_fake_quant(g, qz.backend_preset("academic"))
        sch = G.scheme_to_attrs(qz.backend_preset("academic").activation)
        nodes = list(gq.nodes) + [Node("fq:out", "fakequant",
                                       {"scheme": sch, "kernel": "fixed"},
                                       ["c"])]
        gq = Graph(nodes, gq.params, gq.inputs, ["fq:out"])
        x = rand_t(rng, 2, 3, 10, 10)
        qp = G.calibrate(gq, [x])
        y_fp = fp32_out(g, x)
        y_q = G.infer(gq, x, qp)[0]["fq:out"].data

        s_x = qp["fq:in:c"].scales[0]
        s_w = max(qp["c:w"].scales)
        s_o = qp["fq:out"].scales[0]
        ones_w = Tensor(np.ones_like(w.data))
        ones_x = Tensor(np.ones_like(x.data))
        absw = Tensor(np.abs(w.data))
        absx = Tensor(np.abs(x.data))
        k_count = T.conv2d(ones_x, ones_w).data
        bound = (0.5 * s_w * T.conv2d(absx, ones_w).data
                 + 0.5 * s_x * T.conv2d(ones_x, absw).data
                 + 0.25 * s_w * s_x * k_count
                 + 0.5 * s_o)
        diff = np.abs(y_q - y_fp)
        assert np.all(diff <= bound * (1 + 1e-4) + 1e-4)

    def test_train_mode_ste_mask(self):
        g = Graph([Node("in", "input"),
                   Node("q", "fakequant",
                        {"scheme": G.scheme_to_attrs(qz.QScheme()),
                         "kernel": "fixed"}, ["in"])],
                  {}, ["in"], ["q"])
        qp = {"q": qz.QParams((0.1,), (0,), -128, 127)}
        x = t32([[-20.0, -1.0, 0.0, 3.0, 20.0]])
        tape = Tape()
        outs, _ = G.infer(g, x, qp, mode="train", tape=tape)
        loss = T.sum_all(outs["q"], tape)
        grads = backward(tape, loss)
        assert np.array_equal(grads.get(x).data,
                              [[0.0, 1.0, 1.0, 1.0, 0.0]])

    def test_bn_train_updates_running_stats(self):
        rng = np.random.default_rng(25)
        c = 3
        g = Graph([Node("in", "input"),
                   Node("n", "bn", bn_attrs(1), ["in"])],
                  bn_params(rng, c, 1), ["in"], ["n"])
        x = rand_t(rng, 4, c, 5, 5)
        _, rt = G.infer(g, x, mode="train", tape=Tape())
        bm = x.data.astype(np.float64).mean(axis=(0, 2, 3))
        bv = x.data.astype(np.float64).var(axis=(0, 2, 3))
        want_m = 0.9 * g.params["m1"].data + 0.1 * bm.astype(np.float32)
        want_v = 0.9 * g.params["v1"].data + 0.1 * bv.astype(np.float32)
        np.testing.assert_allclose(rt.state["m1"].data, want_m, rtol=1e-6)
        np.testing.assert_allclose(rt.state["v1"].data, want_v, rtol=1e-5)


# ---------------------------------------------------------------------------
# fake-quant placement policies
# ---------------------------------------------------------------------------

def quantized_add_inputs(g, add_id="add"):
    return [i for i in g.node(add_id).inputs
            if g.node(i).op == "fakequant"]


class TestInsertGraph1:
    def test_academic_counts_on_chain(self):
        rng = np.random.default_rng(30)
        g = G.insert_fake_quant(chain_graph(rng),
                                qz.backend_preset("academic"))
        fq = [n for n in g.nodes if n.op == "fakequant"]
        acts = [n for n in fq if not n.attrs.get("param")]
        wts = [n for n in fq if n.attrs.get("param")]
        assert len(acts) == 3 and len(wts) == 3  # two convs and one linear
        assert {n.id for n in wts} == {"c1:w", "c2:w", "fc:w"}
        # weight nodes sit between the parameter and the consumer
        c1 = g.node("c1")
        assert c1.inputs == ("fq:in:c1", "c1:w")
        assert g.node("c1:w").attrs["param"] == "c1.w"

    def test_academic_add_and_outputs_stay_fp32(self):
        rng = np.random.default_rng(31)
        for ds in (False, True):
            g = G.insert_fake_quant(block_graph(rng, downsample=ds),
                                    qz.backend_preset("academic"))
            assert quantized_add_inputs(g) == []
            assert g.outputs == ("r2",)

    def test_academic_downsample_edge_quantized_separately(self):
        rng = np.random.default_rng(32)
        g = G.insert_fake_quant(block_graph(rng, downsample=True),
                                qz.backend_preset("academic"))
        assert g.node("c1").inputs[0] == "fq:in:c1"
        assert g.node("cd").inputs[0] == "fq:in:cd"
        # two distinct quantizers, so two distinct calibration keys
        x = rand_t(rng, 2, 4, 8, 8)
        qp = G.calibrate(g, [x])
        assert "fq:in:c1" in qp and "fq:in:cd" in qp

    def test_academic_concat_untouched(self):
        rng = np.random.default_rng(33)
        g = G.insert_fake_quant(concat_graph(rng),
                                qz.backend_preset("academic"))
        assert g.node("cat").inputs == ("ra", "rb")

    def test_hardware_graph1_concat_shares_one_scale(self):
        rng = np.random.default_rng(34)
        g = G.insert_fake_quant(concat_graph(rng), qz.backend_preset("acl"))
        cat = g.node("cat")
        keys = [g.node(i).attrs["key"] for i in cat.inputs]
        assert keys[0] == keys[1] == "fq:cat:cat"
        qp = G.calibrate(g, [rand_t(rng, 2, 4, 6, 6)])
        assert qp[keys[0]] is qp[keys[1]]
        assert qp["fq:cat:cat"].qmin == 0  # acl activations are unsigned


class TestInsertGraph2:
    def test_add_has_exactly_one_quantized_input(self):
        rng = np.random.default_rng(40)
        for ds in (False, True):
            g0 = G.fold_bn(block_graph(rng, downsample=ds), 0)
            g = G.insert_fake_quant(g0, qz.backend_preset("trt"))
            q = quantized_add_inputs(g)
            assert len(q) == 1
            # the surviving raw input is the residual conv output
            raw = [i for i in g.node("add").inputs if i not in q]
            assert raw == ["c2"]

    def test_shortcut_and_first_conv_share_one_wire(self):
        rng = np.random.default_rng(41)
        g0 = G.fold_bn(block_graph(rng, downsample=False), 0)
        g = G.insert_fake_quant(g0, qz.backend_preset("trt"))
        fq_on_in = [n for n in g.nodes
                    if n.op == "fakequant" and n.inputs == ("in",)]
        assert len(fq_on_in) == 1
        fid = fq_on_in[0].id
        assert g.node("c1").inputs[0] == fid
        assert fid in g.node("add").inputs

    def test_outputs_are_quantized(self):
        rng = np.random.default_rng(42)
        g0 = G.fold_bn(block_graph(rng), 0)
        g = G.insert_fake_quant(g0, qz.backend_preset("trt"))
        assert g.outputs == ("fq:r2",)
        assert g.node("fq:r2").op == "fakequant"

    def test_residual_override_flips_sides(self):
        rng = np.random.default_rng(43)
        g0 = G.fold_bn(block_graph(rng, downsample=True), 0)
        nodes = [Node(n.id, n.op,
                      dict(n.attrs, residual_input="cd")
                      if n.id == "add" else n.attrs, n.inputs)
                 for n in g0.nodes]
        g0 = Graph(nodes, g0.params, g0.inputs, g0.outputs)
        g = G.insert_fake_quant(g0, qz.backend_preset("trt"))
        q = quantized_add_inputs(g)
        raw = [i for i in g.node("add").inputs if i not in q]
        assert raw == ["cd"]

    def test_residual_override_must_name_an_input(self):
        rng = np.random.default_rng(44)
        g0 = G.fold_bn(block_graph(rng), 0)
        nodes = [Node(n.id, n.op,
                      dict(n.attrs, residual_input="nope")
                      if n.id == "add" else n.attrs, n.inputs)
                 for n in g0.nodes]
        g0 = Graph(nodes, g0.params, g0.inputs, g0.outputs)
        with pytest.raises(SchemaError, match="residual_input"):
            G.insert_fake_quant(g0, qz.backend_preset("trt"))

    def test_per_channel_weight_scheme_flows_through(self):
        rng = np.random.default_rng(45)
        g0 = G.fold_bn(block_graph(rng), 0)
        g = G.insert_fake_quant(g0, qz.backend_preset("trt"))
        qp = G.calibrate(g, [rand_t(rng, 2, 4, 8, 8)])
        assert qp["c1:w"].num_channels == 4
        assert all(z == 0 for z in qp["c1:w"].zero_points)


class TestInsertGraph3:
    @pytest.mark.parametrize("preset", ["tvm", "snpe", "fbgemm"])
    def test_all_add_inputs_quantized(self, preset):
        rng = np.random.default_rng(50)
        for ds in (False, True):
            g0 = G.fold_bn(block_graph(rng, downsample=ds), 0)
            g = G.insert_fake_quant(g0, qz.backend_preset(preset))
            assert len(quantized_add_inputs(g)) == 2

    def test_bottleneck_adds_quantized(self):
        rng = np.random.default_rng(51)
        g0 = G.fold_bn(bottleneck_graph(rng), 0)
        g = G.insert_fake_quant(g0, qz.backend_preset("snpe"))
        assert len(quantized_add_inputs(g)) == 2
        qp = G.calibrate(g, [rand_t(rng, 2, 4, 8, 8)])
        y, _ = G.infer(g, rand_t(rng, 2, 4, 8, 8), qp)

    def test_pot_scales_under_tvm(self):
        rng = np.random.default_rng(52)
        g0 = G.fold_bn(block_graph(rng), 0)
        g = G.insert_fake_quant(g0, qz.backend_preset("tvm"))
        qp = G.calibrate(g, [rand_t(rng, 2, 4, 8, 8)])
        for key, p in qp.items():
            for s in p.scales:
                assert float(np.log2(s)) == int(np.log2(s)), key


class TestInsertErrors:
    def test_double_insert_rejected(self):
        rng = np.random.default_rng(60)
        g = G.insert_fake_quant(chain_graph(rng),
                                qz.backend_preset("academic"))
        with pytest.raises(ValueError, match="already carries"):
            G.insert_fake_quant(g, qz.backend_preset("academic"))

    def test_per_channel_activation_rejected(self):
        rng = np.random.default_rng(61)
        bad = qz.BackendPreset(
            name="custom",
            weight=qz.QScheme(),
            activation=qz.QScheme(granularity=qz.PER_CHANNEL),
            graph_policy="graph1", fold_bn=False)
        with pytest.raises(ValueError, match="per-channel"):
            G.insert_fake_quant(chain_graph(rng), bad)

    def test_unknown_policy_rejected(self):
        rng = np.random.default_rng(62)
        bad = qz.BackendPreset(name="custom", weight=qz.QScheme(),
                               activation=qz.QScheme(),
                               graph_policy="graph9", fold_bn=False)
        with pytest.raises(ValueError, match="graph9"):
            G.insert_fake_quant(chain_graph(rng), bad)

    def test_bitwidth_override(self):
        rng = np.random.default_rng(63)
        g = G.insert_fake_quant(chain_graph(rng),
                                qz.backend_preset("academic"), bits=4)
        sch = g.node("c1:w").attrs["scheme"]
        assert sch["bits"] == 4


# ---------------------------------------------------------------------------
# batch-norm folding
# ---------------------------------------------------------------------------

def single_conv_bn(rng, c=2, eps=1e-5, bias=True, gamma=None, var=None,
                   mean=None, beta=None):
    params = {"w": rand_t(rng, c, c, 3, 3)}
    attrs = {"weight": "w", "bias": None, "stride": [1, 1],
             "padding": [1, 1], "groups": 1}
    if bias:
        params["b"] = rand_t(rng, c)
        attrs["bias"] = "b"
    params["g1"] = gamma if gamma is not None else \
        Tensor((np.abs(rng.standard_normal(c)) + 0.5).astype(np.float32))
    params["be1"] = beta if beta is not None else rand_t(rng, c)
    params["m1"] = mean if mean is not None else rand_t(rng, c)
    params["v1"] = var if var is not None else \
        Tensor((np.abs(rng.standard_normal(c)) + 0.5).astype(np.float32))
    nodes = [Node("in", "input"),
             Node("c1", "conv2d", attrs, ["in"]),
             Node("n1", "bn", bn_attrs(1, eps), ["c1"]),
             Node("r1", "relu", {}, ["n1"])]
    return Graph(nodes, params, ["in"], ["r1"])


class TestFoldBn:
    def test_hand_worked_fold(self):
        """gamma 2, var 4, mean 1, bias 0, beta 0.5 folds to the original
        weight and bias -0.5."""
        rng = np.random.default_rng(70)
        c = 2
        g = single_conv_bn(
            rng, c, eps=1e-30,
            gamma=t32([2.0] * c), var=t32([4.0] * c),
            mean=t32([1.0] * c), beta=t32([0.5] * c))
        zero_b = Graph(g.nodes, dict(g.params, b=t32([0.0] * c)),
                       g.inputs, g.outputs)
        folded = G.fold_bn(zero_b, 0)
        conv = folded.node("c1")
        assert np.array_equal(folded.params[conv.attrs["weight"]].data,
                              zero_b.params["w"].data)
        assert np.array_equal(folded.params[conv.attrs["bias"]].data,
                              np.full(c, -0.5, np.float32))
        assert all(n.op != "bn" for n in folded.nodes)

    def test_strategy0_matches_unfolded(self):
        rng = np.random.default_rng(71)
        g = single_conv_bn(rng)
        x = rand_t(rng, 2, 2, 8, 8)
        ref = fp32_out(g, x)
        got = fp32_out(G.fold_bn(g, 0), x)
        denom = np.maximum(np.abs(ref), 1e-3)
        assert np.max(np.abs(got - ref) / denom) <= 1e-5

    @pytest.mark.parametrize("strategy", [1, 2, 3, 4])
    def test_strategies_share_inference_form(self, strategy):
        rng = np.random.default_rng(72)
        g = single_conv_bn(rng)
        x = rand_t(rng, 2, 2, 8, 8)
        base = fp32_out(G.fold_bn(g, 0), x)
        gk = G.fold_bn(g, strategy)
        got = fp32_out(gk, x)
        denom = np.maximum(np.abs(base), 1e-3)
        assert np.max(np.abs(got - base) / denom) <= 1e-6
        flat = G.to_inference_form(gk)
        assert not any("bn" in n.attrs for n in flat.nodes)
        assert np.array_equal(fp32_out(flat, x), base)

    def test_fold_requires_conv_producer(self):
        rng = np.random.default_rng(73)
        nodes = [Node("in", "input"),
                 Node("r", "relu", {}, ["in"]),
                 Node("n1", "bn", bn_attrs(1), ["r"])]
        g = Graph(nodes, bn_params(rng, 3, 1), ["in"], ["n1"])
        with pytest.raises(SchemaError, match="directly follow"):
            G.fold_bn(g, 0)

    def test_fold_rejects_shared_conv_output(self):
        rng = np.random.default_rng(74)
        g0 = single_conv_bn(rng)
        nodes = list(g0.nodes) + [Node("extra", "relu", {}, ["c1"])]
        g = Graph(nodes, g0.params, g0.inputs, g0.outputs)
        with pytest.raises(SchemaError, match="other\\s+consumers"):
            G.fold_bn(g, 0)

    def test_fold_rejects_nonpositive_eps(self):
        rng = np.random.default_rng(75)
        g0 = single_conv_bn(rng)
        nodes = [Node(n.id, n.op, dict(n.attrs, eps=0.0)
                      if n.op == "bn" else n.attrs, n.inputs)
                 for n in g0.nodes]
        with pytest.raises(SchemaError, match="eps"):
            Graph(nodes, g0.params, g0.inputs, g0.outputs)

    def test_fold_absorbs_standalone_weight_quantizer(self):
        """Folding after insertion moves the weight quantizer inside the
        conv and keeps its calibration key."""
        rng = np.random.default_rng(76)
        g = single_conv_bn(rng)
        gq = G.insert_fake_quant(g, qz.backend_preset("academic"))
        folded = G.fold_bn(gq, 2)
        conv = folded.node("c1")
        assert "wq" in conv.attrs and conv.attrs["wq"]["key"] == "c1:w"
        assert all(n.id != "c1:w" for n in folded.nodes)
        assert len(conv.inputs) == 1

    def test_strategy0_retargets_weight_quantizer(self):
        rng = np.random.default_rng(77)
        g = single_conv_bn(rng)
        gq = G.insert_fake_quant(g, qz.backend_preset("academic"))
        folded = G.fold_bn(gq, 0)
        wfq = folded.node("c1:w")
        assert wfq.attrs["param"] == folded.node("c1").attrs["weight"]
        x = rand_t(rng, 1, 2, 6, 6)
        qp = G.calibrate(folded, [x])
        G.infer(folded, x, qp)

    def test_unfolded_pipeline_matches_folded_at_8bit(self):
        """Quantizing before or after strategy-0 folding gives close
        outputs at 8 bits (the weight grids differ slightly)."""
        rng = np.random.default_rng(78)
        g = single_conv_bn(rng)
        x = rand_t(rng, 2, 2, 8, 8)
        a = G.insert_fake_quant(G.fold_bn(g, 0),
                                qz.backend_preset("academic"))
        qa = G.calibrate(a, [x])
        ya, _ = G.infer(a, x, qa)
        b = G.fold_bn(G.insert_fake_quant(g, qz.backend_preset("academic")),
                      1)
        qb = G.calibrate(b, [x])
        yb, _ = G.infer(b, x, qb)
        ref = fp32_out(g, x)
        scale = np.abs(ref).max()
        assert np.abs(ya["r1"].data - ref).max() / scale < 0.05
        assert np.abs(yb["r1"].data - ref).max() / scale < 0.05


class TestFoldTraining:
    """Gradients of the on-the-fly folding strategies.

    Batch statistics enter strategies 2 and 3 as detached constants, so
    the finite-difference oracle freezes them at the evaluation point.
    """

    @staticmethod
    def loss_of(graph, x, coef, tape):
        outs, rt = G.infer(graph, x, mode="train", tape=tape)
        y = outs[graph.outputs[0]]
        prod = Tensor((y.data * coef).sum(keepdims=True)
                      .reshape(1).astype(np.float32))
        tape.record(prod, (y,), lambda g: (g.reshape(-1)[0] * coef,))
        return prod, rt

    @staticmethod
    def frozen_forward(strategy, xd, wd, bd, gam, bet, mu, var, eps, coef,
                       stats):
        """Float64 forward with the batch statistics held constant."""
        import numpy.lib.stride_tricks as st
        sig_run = np.sqrt(var + eps)
        if strategy == 1:
            cw = gam / sig_run
            bm, sv = mu, sig_run
        else:
            bmean, bvar = stats
            cw = gam / (np.sqrt(bvar + eps) if strategy == 2 else sig_run)
            bm, sv = bmean, np.sqrt(bvar + eps)
        wf = wd * cw.reshape(-1, 1, 1, 1)
        win = st.sliding_window_view(xd, wf.shape[1:], axis=(1, 2, 3))[:, 0]
        y = np.einsum("nhwcij,ocij->nohw", win, wf)
        if strategy == 3:
            y = y * (sig_run / sv).reshape(1, -1, 1, 1)
        bf = bet + (bd - bm) * gam / sv
        y = y + bf.reshape(1, -1, 1, 1)
        return float((y * coef).sum())

    @pytest.mark.parametrize("strategy", [1, 2, 3])
    def test_grads_match_frozen_fd(self, strategy):
        rng = np.random.default_rng(80 + strategy)
        c = 2
        g0 = single_conv_bn(rng, c)
        nodes = [n for n in g0.nodes if n.op != "relu"]
        g0 = Graph(nodes, g0.params, g0.inputs, ["n1"])
        gk = G.fold_bn(g0, strategy)
        x = rand_t(rng, 2, c, 5, 5)
        coef = rng.standard_normal((2, c, 5, 5)).astype(np.float32)

        tape = Tape()
        loss, rt = self.loss_of(gk, x, coef, tape)
        grads = backward(tape, loss)
        stats = rt.bn_batch_stats.get("c1")

        xd = np.pad(x.data.astype(np.float64),
                    ((0, 0), (0, 0), (1, 1), (1, 1)))
        args = dict(xd=xd, wd=g0.params["w"].data.astype(np.float64),
                    bd=g0.params["b"].data.astype(np.float64),
                    gam=g0.params["g1"].data.astype(np.float64),
                    bet=g0.params["be1"].data.astype(np.float64),
                    mu=g0.params["m1"].data.astype(np.float64),
                    var=g0.params["v1"].data.astype(np.float64),
                    eps=1e-5, coef=coef.astype(np.float64), stats=stats)

        def check(key, analytic):
            base_arr = args[key]
            h = 1e-4
            fd = np.zeros_like(base_arr)
            it = np.nditer(base_arr, flags=["multi_index"])
            while not it.finished:
                idx = it.multi_index
                for sgn in (1, -1):
                    kw = dict(args)
                    pert = base_arr.copy()
                    pert[idx] += sgn * h
                    kw[key] = pert
                    fd[idx] += sgn * self.frozen_forward(strategy, **kw)
                fd[idx] /= 2 * h
                it.iternext()
            rel = np.abs(analytic - fd) / np.maximum(np.abs(fd), 1e-2)
            assert rel.max() < 2e-3, (key, rel.max())

        check("wd", grads.get(gk.params["w"]).astype(np.float64))
        check("gam", grads.get(gk.params["g1"]).astype(np.float64))
        check("bet", grads.get(gk.params["be1"]).astype(np.float64))
        check("bd", grads.get(gk.params["b"]).astype(np.float64))

    def test_strategy4_trains_through_explicit_bn(self):
        rng = np.random.default_rng(85)
        g = G.fold_bn(single_conv_bn(rng), 4)
        x = rand_t(rng, 4, 2, 6, 6)
        tape = Tape()
        coef = rng.standard_normal((4, 2, 6, 6)).astype(np.float32)
        loss, rt = TestFoldTraining.loss_of(g, x, coef, tape)
        grads = backward(tape, loss)
        for name in ("w", "g1", "be1"):
            gt = grads.get(g.params[name])
            assert gt is not None and np.isfinite(gt.data).all(), name
        # EMA moved the running statistics toward this batch
        assert not np.array_equal(rt.state["m1"].data, g.params["m1"].data)


# ---------------------------------------------------------------------------
# calibration over graphs
# ---------------------------------------------------------------------------

class TestGraphCalibration:
    def test_weight_scale_uses_folded_weight(self):
        rng = np.random.default_rng(90)
        g = G.fold_bn(single_conv_bn(rng), 1)
        gq = G.insert_fake_quant(g, qz.backend_preset("trt"))
        qp = G.calibrate(gq, [rand_t(rng, 1, 2, 6, 6)])
        wf = G.folded_weight(gq, gq.node("c1"))
        want = np.abs(wf.reshape(2, -1)).max(axis=1) / 127.5
        np.testing.assert_allclose(qp["c1:w"].scales, want, rtol=1e-7)

    def test_activation_methods_accepted(self):
        rng = np.random.default_rng(91)
        g = G.insert_fake_quant(chain_graph(rng),
                                qz.backend_preset("academic"))
        data = [rand_t(rng, 2, 3, 8, 8) for _ in range(3)]
        for method in ("minmax", "quantile", "mse", "kld", "norm",
                       "meanstd"):
            qp = G.calibrate(g, data, act_calib=method)
            y, _ = G.infer(g, data[0], qp)
            assert np.isfinite(y["fc"].data).all(), method

    def test_unknown_method_and_empty_dataset(self):
        rng = np.random.default_rng(92)
        g = G.insert_fake_quant(chain_graph(rng),
                                qz.backend_preset("academic"))
        with pytest.raises(ValueError, match="sobel"):
            G.calibrate(g, [rand_t(rng, 1, 3, 8, 8)], act_calib="sobel")
        with pytest.raises(EmptyDatasetError):
            G.calibrate(g, [])

    def test_quantile_alpha_passes_through(self):
        rng = np.random.default_rng(93)
        g = G.insert_fake_quant(chain_graph(rng),
                                qz.backend_preset("academic"))
        data = [rand_t(rng, 2, 3, 8, 8)]
        full = G.calibrate(g, data, act_calib="quantile",
                           act_args={"alpha": 1.0})
        clipped = G.calibrate(g, data, act_calib="quantile",
                              act_args={"alpha": 0.9})
        assert clipped["fq:in:c1"].scales[0] < full["fq:in:c1"].scales[0]


# ---------------------------------------------------------------------------
# batch-norm statistics recalibration
# ---------------------------------------------------------------------------

class TestRecalibrateBn:
    def test_fp32_stats_match_direct_average(self):
        rng = np.random.default_rng(100)
        g = single_conv_bn(rng)
        batches = [rand_t(rng, 3, 2, 6, 6) for _ in range(5)]
        out = G.recalibrate_bn_stats(g, batches)
        means, variances = [], []
        for b in batches:
            y = T.conv2d(b, g.params["w"], g.params["b"], (1, 1), (1, 1))
            yd = y.data.astype(np.float64)
            means.append(yd.mean(axis=(0, 2, 3)))
            variances.append(yd.var(axis=(0, 2, 3)))
        np.testing.assert_allclose(out.params["m1"].data,
                                   np.mean(means, axis=0), rtol=1e-5)
        np.testing.assert_allclose(out.params["v1"].data,
                                   np.mean(variances, axis=0), rtol=1e-5)
        # the original graph is untouched
        assert not np.array_equal(out.params["m1"].data,
                                  g.params["m1"].data)

    def test_8bit_quantization_barely_moves_stats(self):
        rng = np.random.default_rng(101)
        g = G.fold_bn(single_conv_bn(rng), 1)
        gq = G.insert_fake_quant(g, qz.backend_preset("academic"))
        batches = [rand_t(rng, 3, 2, 6, 6) for _ in range(4)]
        qp = G.calibrate(gq, batches)
        plain = G.recalibrate_bn_stats(g, batches)
        quant = G.recalibrate_bn_stats(gq, batches, qp)
        for name in ("m1", "v1"):
            a = plain.params[name].data
            b = quant.params[name].data
            assert np.abs(a - b).max() <= 0.02 * np.abs(a).max() + 0.02

    def test_quantized_graph_requires_qparams(self):
        rng = np.random.default_rng(102)
        gq = G.insert_fake_quant(G.fold_bn(single_conv_bn(rng), 1),
                                 qz.backend_preset("academic"))
        with pytest.raises(CalibrationRequiredError):
            G.recalibrate_bn_stats(gq, [rand_t(rng, 1, 2, 6, 6)])

    def test_low_bit_eval_error_shrinks_after_recal(self):
        """Measured toy experiment: with mean-offset inputs, 4-bit weight
        rounding shifts each channel's pre-BN mean (the shift scales with
        E[x]*sum of rounding errors), so normalizing with float-era
        statistics misplaces the output; refreshing the running stats on
        the calibration set pulls the quantized output back toward the
        float reference.  Fully seeded, so the measured margin is stable.
        """
        rng = np.random.default_rng(103)
        g = single_conv_bn(rng, c=4)
        batches = [Tensor(rng.normal(2.0, 1.0, (4, 4, 8, 8))
                          .astype(np.float32)) for _ in range(6)]
        # Make the float graph's running stats the ground truth for this
        # data so the only output discrepancy left is quantization noise.
        g = G.recalibrate_bn_stats(g, batches)
        refs = [fp32_out(g, b) for b in batches]

        gq = G.insert_fake_quant(G.fold_bn(g, 1),
                                 qz.backend_preset("academic"), bits=4)
        qp = G.calibrate(gq, batches)

        def err(graph):
            tot = 0.0
            for b, r in zip(batches, refs):
                y, _ = G.infer(graph, b, qp)
                tot += float(np.mean((y[graph.outputs[0]].data - r) ** 2))
            return tot / len(batches)

        before = err(gq)
        after = err(G.recalibrate_bn_stats(gq, batches, qp))
        assert after < before
        # the refresh must actually have moved the statistics
        assert not np.allclose(
            G.recalibrate_bn_stats(gq, batches, qp).params["m1"].data,
            gq.params["m1"].data)

    def test_no_bn_is_identity(self):
        rng = np.random.default_rng(104)
        g = chain_graph(rng)
        assert G.recalibrate_bn_stats(g, [rand_t(rng, 1, 3, 8, 8)]) is g
