"""Command-line front end for calibration, quantization, and reports.

Subcommands: ``presets``, ``calibrate``, ``quantize``, ``run``,
``compare``, ``train-qat``. Every run is driven by a :class:`RunConfig`
whose seed pins all stochastic choices, and every artifact is written as
canonical JSON (sorted keys, compact separators) so identical inputs
produce byte-identical files.

Exit codes: 0 success, 2 missing or invalid input, 3 empty dataset,
4 uncalibrated values, 5 numeric failure, 6 threshold violation.
The ``QLOWER_LOG`` environment variable (error, info, debug) selects
log verbosity; reports stay JSON and ``--pretty`` adds a human summary
on stdout.
"""

import argparse
import dataclasses
import json
import logging
import os
import sys

import numpy as np

from . import graph as G
from . import lowering as L
from . import qat
from . import quantizer as qz
from .errors import (AccumulatorOverflowError, CalibrationRequiredError,
                     DegenerateInputError, EmptyDatasetError, NumericError,
                     SchemaError, ShapeError)
from .graph import _tensor_from_json, _tensor_to_json

log = logging.getLogger("qlower")

EXIT_OK = 0
EXIT_INPUT = 2
EXIT_EMPTY = 3
EXIT_UNCALIBRATED = 4
EXIT_NUMERIC = 5
EXIT_THRESHOLD = 6

_LOG_LEVELS = {"error": logging.ERROR, "info": logging.INFO,
               "debug": logging.DEBUG}


class ThresholdViolation(Exception):
    """A report metric fell below a gate the config asked to enforce."""


@dataclasses.dataclass
class RunConfig:
    """Everything one invocation depends on; the seed pins the rest."""

    subcommand: str
    model: str = None
    qparams: str = None
    data: str = None
    preset: str = "academic"
    act_calib: str = "minmax"
    wt_calib: str = "minmax"
    bits: int = None
    graph_policy: str = None
    fold_bn: int = None
    seed: int = 0
    out: str = None
    threads: int = 1
    pretty: bool = False
    name_filter: str = None
    kernel: str = None
    epochs: int = 1
    lr: float = 0.01
    min_bitexact: float = None
    min_cosine: float = None
    min_acc: float = None

    @classmethod
    def from_args(cls, args):
        fields = {f.name for f in dataclasses.fields(cls)}
        picked = {k.replace("-", "_"): v for k, v in vars(args).items()}
        return cls(**{k: v for k, v in picked.items() if k in fields})


# -- shared plumbing ---------------------------------------------------------


def _read(path, what):
    if path is None:
        raise ValueError(f"this subcommand needs --{what}")
    if not os.path.isfile(path):
        raise FileNotFoundError(path)
    with open(path, "rb") as fh:
        return fh.read()


def _write(path, payload):
    data = payload if isinstance(payload, bytes) else payload.encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(data)
    log.info("wrote %s (%d bytes)", path, len(data))


def _dump(doc):
    return json.dumps(doc, sort_keys=True, separators=(",", ":")).encode()


def _load_batch_file(path):
    with open(path, "rb") as fh:
        try:
            obj = json.loads(fh.read().decode("utf-8"))
        except (json.JSONDecodeError, UnicodeDecodeError) as e:
            raise SchemaError(f"{path}: invalid JSON ({e})") from None
    if not isinstance(obj, dict):
        raise SchemaError(f"{path}: batch must be a JSON object")
    if {"shape", "dtype", "data_b64"} <= set(obj):
        return _tensor_from_json(path, obj), None
    labels = None
    if "labels" in obj:
        labels = _tensor_from_json(f"{path}.labels", obj["labels"])
        labels = labels.data.astype(np.int64).ravel()
        obj = obj.get("inputs", {k: v for k, v in obj.items()
                                 if k != "labels"})
        if {"shape", "dtype", "data_b64"} <= set(obj):
            return _tensor_from_json(path, obj), labels
    feeds = {k: _tensor_from_json(f"{path}.{k}", v) for k, v in obj.items()}
    return feeds, labels


def load_dataset(root):
    """Read a dataset directory: manifest.json names batch files in order.

    Each batch file holds one tensor object, a {input-id: tensor} map, or
    an {"inputs": ..., "labels": tensor} pair for training data. Returns
    [(feeds, labels-or-None)] in manifest order.
    """
    manifest = os.path.join(root, "manifest.json")
    if not os.path.isfile(manifest):
        raise FileNotFoundError(manifest)
    with open(manifest, "rb") as fh:
        try:
            names = json.loads(fh.read().decode("utf-8"))
        except (json.JSONDecodeError, UnicodeDecodeError) as e:
            raise SchemaError(f"{manifest}: invalid JSON ({e})") from None
    if isinstance(names, dict):
        names = names.get("files")
    if not isinstance(names, list) or \
            not all(isinstance(n, str) for n in names):
        raise SchemaError(f"{manifest}: expected a list of file names")
    batches = []
    for name in names:
        path = os.path.join(root, name)
        if not os.path.isfile(path):
            raise FileNotFoundError(path)
        batches.append(_load_batch_file(path))
    log.info("dataset %s: %d batches", root, len(batches))
    return batches


def _load_graph(cfg):
    return G.load_model(_read(cfg.model, "model"))


def _resolved_preset(cfg):
    preset = qz.backend_preset(cfg.preset)
    if cfg.graph_policy is not None:
        preset = dataclasses.replace(preset, graph_policy=cfg.graph_policy)
    return preset


def _quantization_graph(cfg, graph, deploy=True):
    """Fold (per preset or override) and insert the preset's quantizers.

    ``deploy`` collapses training-time fold strategies to their static
    inference form; training keeps the strategy's dynamic structure. A
    model that already carries quantizers passes through untouched.
    """
    if graph.has_fakequant():
        log.info("model already carries quantizers; keeping its structure")
        return graph
    preset = _resolved_preset(cfg)
    has_bn = any(n.op == "bn" for n in graph.nodes)
    strategy = cfg.fold_bn
    if strategy is None and preset.fold_bn:
        strategy = 0
    if has_bn and strategy is not None:
        log.info("folding batch norm with strategy %d", strategy)
        graph = G.fold_bn(graph, strategy)
        if deploy and strategy != 0:
            graph = G.to_inference_form(graph)
    return G.insert_fake_quant(graph, preset, bits=cfg.bits)


def _adds_all_aligned(qg):
    """Policy-3 invariant: every integer add aligns two quantized wires."""
    return all(not (isinstance(p, dict) and p.get("mode") == "into-acc")
               for p in qg.plans.values())


# -- subcommands -------------------------------------------------------------


def _scheme_text(s):
    parts = [f"{s.bitwidth}-bit",
             "symmetric" if s.symmetry == qz.SYMMETRIC else "asymmetric",
             s.granularity.replace("_", "-")]
    if s.scale_form == qz.POT_SCALE:
        parts.append("pot")
    parts.append(s.signedness)
    return " ".join(parts)


def cmd_presets(cfg):
    names = [n for n in qz.PRESET_NAMES
             if cfg.name_filter is None or cfg.name_filter in n]
    rows = [("name", "weights", "activations", "graph", "fold-bn")]
    for name in names:
        p = qz.backend_preset(name)
        rows.append((name, _scheme_text(p.weight),
                     _scheme_text(p.activation), p.graph_policy,
                     "yes" if p.fold_bn else "no"))
    widths = [max(len(r[i]) for r in rows) for i in range(len(rows[0]))]
    for r in rows:
        print("  ".join(c.ljust(w) for c, w in zip(r, widths)).rstrip())
    return EXIT_OK


def cmd_calibrate(cfg):
    graph = _load_graph(cfg)
    batches = load_dataset(_require_dir(cfg.data))
    gq = _quantization_graph(cfg, graph)
    qp = G.calibrate(gq, [b for b, _ in batches],
                     act_calib=cfg.act_calib, wt_calib=cfg.wt_calib,
                     threads=cfg.threads)
    payload = G.save_qparams(qp)
    _write(_require_out(cfg), payload)
    if cfg.pretty:
        print(f"calibrated {len(qp)} values "
              f"({cfg.act_calib}/{cfg.wt_calib}, preset {cfg.preset})")
    return EXIT_OK


def cmd_quantize(cfg):
    graph = _load_graph(cfg)
    qp = G.load_qparams(_read(cfg.qparams, "qparams"))
    gq = _quantization_graph(cfg, graph)
    qg = L.lower(gq, qp)
    preset = _resolved_preset(cfg)
    if preset.graph_policy == "graph3" and not _adds_all_aligned(qg):
        raise NumericError("policy graph3 produced an unaligned add; "
                           "quantizer insertion violated its own invariant")
    _write(_require_out(cfg), L.save_quantized(qg))
    if cfg.pretty:
        n_conv = sum(isinstance(p, L.ConvPlan) for p in qg.plans.values())
        print(f"lowered {n_conv} conv/linear nodes under preset "
              f"{cfg.preset}")
    return EXIT_OK


def _is_quantized_doc(raw):
    try:
        doc = json.loads(raw.decode("utf-8"))
    except (json.JSONDecodeError, UnicodeDecodeError):
        return False
    return isinstance(doc, dict) and doc.get("format") == L.QUANTIZED_FORMAT


def cmd_run(cfg):
    raw = _read(cfg.model, "model")
    report = {"batches": []}
    if _is_quantized_doc(raw):
        qg = L.load_quantized(raw)
        log.info("integer run: %d nodes", len(qg.graph.nodes))
        for feeds, _ in load_dataset(_require_dir(cfg.data)):
            ints, deqs = L.run_int(qg, feeds)
            report["batches"].append(
                {out: {"int": None if ints[out] is None
                       else _tensor_to_json(ints[out]),
                       "deq": _tensor_to_json(deqs[out])}
                 for out in qg.graph.outputs})
    else:
        graph = G.load_model(raw)
        qp = G.load_qparams(_read(cfg.qparams, "qparams")) \
            if cfg.qparams else None
        log.info("%s run: %d nodes",
                 "fake-quant" if qp else "fp32", len(graph.nodes))
        for feeds, _ in load_dataset(_require_dir(cfg.data)):
            outs, _ = G.infer(graph, feeds, qp)
            report["batches"].append(
                {out: _tensor_to_json(t) for out, t in outs.items()})
    if not report["batches"]:
        raise EmptyDatasetError("dataset has no batches")
    _write(_require_out(cfg), _dump(report))
    if cfg.pretty:
        print(f"ran {len(report['batches'])} batches")
    return EXIT_OK


def cmd_compare(cfg):
    graph = _load_graph(cfg)
    qp = G.load_qparams(_read(cfg.qparams, "qparams"))
    batches = load_dataset(_require_dir(cfg.data))
    gq = _quantization_graph(cfg, graph)
    qg = L.lower(gq, qp)
    rep = L.compare_fake_real(gq, qg, [b for b, _ in batches])
    rep["preset"] = cfg.preset
    rep["bits"] = cfg.bits or _resolved_preset(cfg).activation.bitwidth
    _write(_require_out(cfg), _dump(rep))
    if cfg.pretty:
        f = rep["final"]
        print(f"final: bitexact={f['bitexact_frac']} "
              f"max_diff={f['max_level_diff']} cosine={f['cosine']:.6f}")
    fin = rep["final"]
    if cfg.min_bitexact is not None and (
            fin["bitexact_frac"] is None
            or fin["bitexact_frac"] < cfg.min_bitexact):
        raise ThresholdViolation(
            f"bitexact_frac {fin['bitexact_frac']} < {cfg.min_bitexact}")
    if cfg.min_cosine is not None and fin["cosine"] < cfg.min_cosine:
        raise ThresholdViolation(
            f"cosine {fin['cosine']} < {cfg.min_cosine}")
    return EXIT_OK


def cmd_train_qat(cfg):
    graph = _load_graph(cfg)
    batches = load_dataset(_require_dir(cfg.data))
    if any(labels is None for _, labels in batches):
        raise SchemaError("train-qat needs labeled batches "
                          "({\"inputs\": ..., \"labels\": ...})")
    qp = G.load_qparams(_read(cfg.qparams, "qparams")) \
        if cfg.qparams else None
    if qp is not None:
        graph = _quantization_graph(cfg, graph, deploy=False)
    else:
        log.info("no qparams given: plain fp32 fine-tune")
    train_cfg = {"kernel": cfg.kernel, "epochs": cfg.epochs, "lr": cfg.lr,
                 "seed": cfg.seed}
    trained, qp_out, metrics = qat.train_qat(graph, batches, train_cfg, qp)
    out = _require_out(cfg)
    _write(out, G.save_model(trained))
    _write(out + ".qparams.json", G.save_qparams(qp_out))
    _write(out + ".metrics.jsonl",
           "".join(json.dumps(m, sort_keys=True) + "\n" for m in metrics))
    if cfg.pretty and metrics:
        print(f"trained {len(metrics)} steps; "
              f"final loss={metrics[-1]['loss']:.4f} "
              f"acc={metrics[-1]['acc']:.3f}")
    if cfg.min_acc is not None:
        final_acc = metrics[-1]["acc"] if metrics else 0.0
        if final_acc < cfg.min_acc:
            raise ThresholdViolation(f"final acc {final_acc} < {cfg.min_acc}")
    return EXIT_OK


def _require_dir(path):
    if path is None:
        raise ValueError("this subcommand needs --data")
    if not os.path.isdir(path):
        raise FileNotFoundError(path)
    return path


def _require_out(cfg):
    if cfg.out is None:
        raise ValueError("this subcommand needs --out")
    return cfg.out


# -- argument parsing --------------------------------------------------------


_DISPATCH = {"presets": cmd_presets, "calibrate": cmd_calibrate,
             "quantize": cmd_quantize, "run": cmd_run,
             "compare": cmd_compare, "train-qat": cmd_train_qat}


def _add_common(sp, *names):
    opts = {
        "model": (str, "model JSON file"),
        "qparams": (str, "quantization parameters JSON file"),
        "data": (str, "dataset directory (manifest.json + tensor files)"),
        "out": (str, "output artifact path"),
        "preset": (str, "backend preset name"),
        "bits": (int, "override the preset's bitwidth"),
    }
    for name in names:
        typ, hlp = opts[name]
        sp.add_argument(f"--{name}", type=typ, help=hlp)
    if "preset" in names:
        sp.set_defaults(preset="academic")
        sp.add_argument("--act-calib", default="minmax",
                        choices=G.CALIB_METHODS,
                        help="activation range estimator")
        sp.add_argument("--wt-calib", default="minmax",
                        choices=G.CALIB_METHODS,
                        help="weight range estimator")
        sp.add_argument("--graph", dest="graph_policy", default=None,
                        choices=("graph1", "graph2", "graph3"),
                        help="override the preset's insertion policy")
        sp.add_argument("--fold-bn", dest="fold_bn", type=int, default=None,
                        choices=(0, 1, 2, 3, 4),
                        help="override the batch-norm fold strategy")
    sp.add_argument("--seed", type=int, default=0,
                    help="seed for every stochastic choice")
    sp.add_argument("--threads", type=int, default=1,
                    help="parallel observer shards during calibration")
    sp.add_argument("--pretty", action="store_true",
                    help="also print a human-readable summary")


def build_parser():
    p = argparse.ArgumentParser(
        prog="qlower",
        description="hardware-aware quantization: calibrate, lower, "
                    "compare, and train")
    sub = p.add_subparsers(dest="subcommand", required=True)

    sp = sub.add_parser("presets", help="list backend presets")
    sp.add_argument("name_filter", nargs="?", default=None,
                    help="only show presets whose name contains this")
    _add_common(sp)

    sp = sub.add_parser("calibrate",
                        help="observe a dataset and write qparams")
    _add_common(sp, "model", "data", "out", "preset", "bits")

    sp = sub.add_parser("quantize",
                        help="fold, insert, and lower to an integer program")
    _add_common(sp, "model", "qparams", "out", "preset", "bits")

    sp = sub.add_parser("run", help="execute a model over a dataset")
    _add_common(sp, "model", "qparams", "data", "out")

    sp = sub.add_parser("compare",
                        help="pair fake simulation against integer execution")
    _add_common(sp, "model", "qparams", "data", "out", "preset", "bits")
    sp.add_argument("--min-bitexact", type=float, default=None,
                    help="fail (exit 6) below this final bit-exact fraction")
    sp.add_argument("--min-cosine", type=float, default=None,
                    help="fail (exit 6) below this final cosine")

    sp = sub.add_parser("train-qat",
                        help="fine-tune quantizer and weight parameters")
    _add_common(sp, "model", "qparams", "data", "out", "preset", "bits")
    sp.add_argument("--kernel", default=None,
                    choices=G.KERNELS,
                    help="re-tag every quantizer with this training kernel")
    sp.add_argument("--epochs", type=int, default=1)
    sp.add_argument("--lr", type=float, default=0.01)
    sp.add_argument("--min-acc", type=float, default=None,
                    help="fail (exit 6) below this final train accuracy")
    return p


def _setup_logging():
    level = os.environ.get("QLOWER_LOG", "error").strip().lower()
    logging.basicConfig(level=_LOG_LEVELS.get(level, logging.ERROR),
                        format="%(levelname)s %(name)s: %(message)s")


def main(argv=None):
    _setup_logging()
    args = build_parser().parse_args(argv)
    cfg = RunConfig.from_args(args)
    log.debug("config: %s", cfg)
    try:
        return _DISPATCH[cfg.subcommand](cfg)
    except FileNotFoundError as e:
        print(f"qlower: missing input: {e.args[0]}", file=sys.stderr)
        return EXIT_INPUT
    except (SchemaError, ShapeError, ValueError) as e:
        print(f"qlower: invalid input: {e}", file=sys.stderr)
        return EXIT_INPUT
    except EmptyDatasetError as e:
        print(f"qlower: empty dataset: {e}", file=sys.stderr)
        return EXIT_EMPTY
    except CalibrationRequiredError as e:
        ids = ", ".join(e.value_ids)
        print(f"qlower: uncalibrated values: {ids}", file=sys.stderr)
        return EXIT_UNCALIBRATED
    except (NumericError, AccumulatorOverflowError,
            DegenerateInputError) as e:
        print(f"qlower: numeric failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except ThresholdViolation as e:
        print(f"qlower: threshold violated: {e}", file=sys.stderr)
        return EXIT_THRESHOLD


if __name__ == "__main__":
    sys.exit(main())
