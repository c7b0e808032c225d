"""Command-line pipeline driver: one subcommand per stage.

Exit codes: 0 success, 1 validation error (bad flags, unreadable or
malformed inputs), 2 runtime error.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import math
import os
import sys
from pathlib import Path

import numpy as np

from quantlab import __version__
from quantlab.errors import QuantLabError, TrainingDivergedError

EXIT_OK, EXIT_VALIDATION, EXIT_RUNTIME = 0, 1, 2
FLOAT_DIGITS = 9
STAGE_FILES = {
    "ptq": "ptq_report.json",
    "training": "train_summary.json",
    "allocation": "plan.json",
    "analysis": "analysis.json",
}
REPORT_FILE = "experiment_report.json"
ANALYZE_PROBES = 16


class ValidationError(Exception):
    """Bad command-line usage or unusable input file."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ValidationError(f"{self.prog}: {message}")


def _bits(text: str) -> int:
    try:
        b = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"invalid integer {text!r}") from None
    if not 2 <= b <= 16:
        raise argparse.ArgumentTypeError("bits must be in [2,16]")
    return b


def _positive_int(text: str) -> int:
    try:
        v = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"invalid integer {text!r}") from None
    if v < 1:
        raise argparse.ArgumentTypeError(f"must be >= 1, got {v}")
    return v


def _seed(text: str) -> int:
    try:
        v = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"invalid seed {text!r}") from None
    if not 0 <= v < 2**64:
        raise argparse.ArgumentTypeError("seed must be an unsigned 64-bit integer")
    return v


def _dims(text: str) -> tuple:
    try:
        parts = [int(p) for p in text.split(",")]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected D or D,K, got {text!r}") from None
    if len(parts) not in (1, 2) or min(parts) < 1:
        raise argparse.ArgumentTypeError(f"expected D or D,K with positive entries, got {text!r}")
    return tuple(parts)


def _range_mode(text: str):
    from quantlab.calibration import parse_range_mode

    try:
        return parse_range_mode(text)
    except QuantLabError as exc:
        raise argparse.ArgumentTypeError(str(exc)) from None


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="quantlab", description="Quantization pipeline for float32 MLPs.")
    p.add_argument("--version", action="version", version=f"quantlab {__version__}")
    p.add_argument("--seed", type=_seed, default=42, help="global seed (default 42)")
    p.add_argument("--out", dest="out_dir", default=".", help="output directory (default .)")
    p.add_argument("--format", choices=["json", "text"], default="json", help="stdout format")
    sub = p.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)
    sub.required = True

    g = sub.add_parser("gen-model", help="generate a seeded model from the zoo")
    g.add_argument("--scale", choices=["small", "medium", "large-desk"], required=True)
    g.add_argument("--depth", type=_positive_int, help="override hidden layer count")
    g.add_argument("--width", type=_positive_int, help="override hidden width")
    g.add_argument("--in-dim", type=_positive_int, help="input width (default: hidden width)")
    g.add_argument("--out-dim", type=_positive_int, help="output width (default: hidden width)")
    g.add_argument("--dropout", type=float, default=0.1)
    g.add_argument("--seed", type=_seed, dest="seed_override", metavar="N", help="overrides the global seed")
    g.add_argument("--out", dest="out_file", default="model.qtm")

    d = sub.add_parser("gen-data", help="generate a synthetic labeled data set")
    d.add_argument("--task", choices=["teacher", "blobs"], required=True)
    d.add_argument("--n", type=_positive_int, required=True)
    d.add_argument("--dims", type=_dims, required=True, help="input dim D or D,K (K defaults to D, or 4 for blobs)")
    d.add_argument("--noise", type=float, default=0.01, help="teacher output noise std")
    d.add_argument("--seed", type=_seed, dest="seed_override", metavar="N", help="overrides the global seed")
    d.add_argument("--out", dest="out_file", default="data.qcal")

    t = sub.add_parser("train", help="SGD training, optionally quantization-aware")
    t.add_argument("--model", required=True)
    t.add_argument("--data", required=True)
    t.add_argument("--lr", type=float, default=0.001, help="learning rate (default 0.001)")
    t.add_argument("--steps", type=_positive_int, default=1000)
    t.add_argument("--batch", type=_positive_int, default=32)
    t.add_argument("--qat", action="store_true", help="train with fake-quantized weights")
    t.add_argument("--bits", type=_bits, default=8, help="bit width for --qat")
    t.add_argument("--scale-rule", choices=["alg1", "thm1", "mse"], default="alg1")
    t.add_argument("--refresh-every", type=_positive_int, default=50)
    t.add_argument("--conv-eps", type=float, default=1e-5, help="convergence threshold; 0 disables")
    t.add_argument("--seed", type=_seed, dest="seed_override", metavar="N", help="overrides the global seed")
    t.add_argument("--out", dest="out_file", default="trained.qtm")

    c = sub.add_parser("calibrate", help="weight and activation range statistics")
    c.add_argument("--model", required=True)
    c.add_argument("--data", required=True)
    c.add_argument("--mode", type=_range_mode, default="minmax", help="minmax or pct:P")
    c.add_argument("--out", dest="out_file", default="stats.json")

    q = sub.add_parser("ptq", help="post-training quantization")
    q.add_argument("--model", required=True)
    q.add_argument("--data", required=True)
    q.add_argument("--bits", type=_bits, default=8)
    q.add_argument("--scale-rule", choices=["alg1", "thm1", "mse"], default="alg1")
    q.add_argument("--scheme", choices=["affine", "log"], default="affine")
    q.add_argument("--mode", type=_range_mode, default="minmax", help="minmax or pct:P")
    q.add_argument("--gamma", action="store_true", help="apply the second-moment scaling factor")
    q.add_argument("--global-range", action="store_true", help="one range shared by all layers")
    q.add_argument("--quantize-biases", action="store_true")
    q.add_argument("--target-alpha", type=float, help="required compression ratio")
    q.add_argument("--out", dest="out_file", default="quantized.qtm")

    a = sub.add_parser("allocate", help="per-layer bit allocation under a budget")
    a.add_argument("--model", required=True)
    a.add_argument("--data", required=True)
    a.add_argument("--budget", type=_positive_int, required=True)
    a.add_argument("--bmin", type=_bits, default=2)
    a.add_argument("--bmax", type=_bits, default=16)
    a.add_argument("--method", choices=["probe", "gradproxy"], default="probe")
    a.add_argument("--probe-bits", type=_bits, default=4)
    a.add_argument("--out", dest="out_file", default="plan.json")

    n = sub.add_parser("analyze", help="error budget, cost estimate and size report")
    n.add_argument("--model", required=True)
    n.add_argument("--quantized", required=True)
    n.add_argument("--data", required=True)
    n.add_argument("--out", dest="out_file", default="analysis.json")

    r = sub.add_parser("report", help="merge stage outputs into experiment_report.json")
    r.add_argument("--dir", required=True, help="directory holding stage outputs")
    r.add_argument("--out", dest="out_file", default=REPORT_FILE)
    return p


# ---- output helpers ------------------------------------------------------


def _clean(obj):
    """JSON-safe copy with floats rounded to 9 significant digits."""
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, (bool, np.bool_)):
        return bool(obj)
    if isinstance(obj, (int, np.integer)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        v = float(obj)
        if not math.isfinite(v):
            return None
        return float(f"{v:.{FLOAT_DIGITS}g}")
    if isinstance(obj, Path):
        return str(obj)
    if hasattr(obj, "value"):  # enums
        return obj.value
    return obj


def dumps(obj) -> str:
    return json.dumps(_clean(obj), indent=2) + "\n"


def _write_json(path: Path, obj) -> None:
    from quantlab.model_io import _write_atomic

    _write_atomic(path, dumps(obj).encode())


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for block in iter(lambda: f.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def threads() -> int:
    raw = os.environ.get("QUANTLAB_THREADS", "1")
    try:
        v = int(raw)
    except ValueError:
        raise ValidationError(f"QUANTLAB_THREADS must be a positive integer, got {raw!r}") from None
    if v < 1:
        raise ValidationError(f"QUANTLAB_THREADS must be a positive integer, got {raw!r}")
    return v


class Run:
    """Per-invocation context: resolved config, hashed inputs, output paths."""

    def __init__(self, args: argparse.Namespace):
        self.args = args
        self.out_dir = Path(args.out_dir)
        self.inputs: dict = {}

    @property
    def seed(self) -> int:
        s = getattr(self.args, "seed_override", None)
        return self.args.seed if s is None else s

    def resolved_config(self) -> dict:
        cfg = {k: v for k, v in vars(self.args).items() if k not in ("seed_override",)}
        cfg["seed"] = self.seed
        cfg["threads"] = threads()
        if "mode" in cfg:
            cfg["mode"] = str(cfg["mode"])
        return cfg

    def provenance(self) -> dict:
        return {
            "tool_version": __version__,
            "resolved_config": self.resolved_config(),
            "input_file_hashes": dict(sorted(self.inputs.items())),
        }

    def output_path(self, name=None) -> Path:
        p = Path(name or self.args.out_file)
        if not p.is_absolute():
            p = self.out_dir / p
        p.parent.mkdir(parents=True, exist_ok=True)
        return p

    def read_input(self, flag: str, path) -> Path:
        p = Path(path)
        if not p.is_file():
            raise ValidationError(f"{flag} {path}: file not found")
        self.inputs[str(p)] = sha256_file(p)
        return p

    def load_model(self, flag: str, path):
        from quantlab.model_io import load_model

        p = self.read_input(flag, path)
        try:
            return load_model(p)
        except QuantLabError as exc:
            raise ValidationError(f"{flag} {path}: {exc}") from None

    def load_data(self, flag: str, path):
        """Labeled set from a ``.qcal`` input file and its sidecars."""
        from quantlab.model_io import load_calibration
        from quantlab.training import LabeledSet

        p = self.read_input(flag, path)
        tpath = self.read_input(flag, f"{path}.targets")
        mpath = self.read_input(flag, f"{path}.json")
        try:
            meta = json.loads(mpath.read_text())
            x = load_calibration(p).as_batch()
            y = np.stack(load_calibration(tpath).samples)
            task = meta["task"]
            if task == "classification":
                y = y.reshape(-1).astype(np.int64)
            return LabeledSet(x, y, task, meta.get("generated_by", ""))
        except (QuantLabError, KeyError, ValueError) as exc:
            raise ValidationError(f"{flag} {path}: {exc}") from None

    def emit(self, doc: dict, text_lines=None) -> None:
        if self.args.format == "text" and text_lines is not None:
            sys.stdout.write("\n".join(text_lines) + "\n")
        else:
            sys.stdout.write(dumps(doc))


def _table(headers, rows) -> list:
    cells = [[str(h) for h in headers]] + [[_fmt(c) for c in r] for r in rows]
    widths = [max(len(r[i]) for r in cells) for i in range(len(headers))]
    line = lambda r: "  ".join(c.rjust(w) for c, w in zip(r, widths))  # noqa: E731
    return [line(cells[0]), "  ".join("-" * w for w in widths)] + [line(r) for r in cells[1:]]


def _fmt(v) -> str:
    if isinstance(v, float):
        return f"{v:.6g}"
    if v is None:
        return "-"
    return str(v)


# ---- subcommands ---------------------------------------------------------


def cmd_gen_model(run: Run) -> dict:
    from quantlab.model_io import save_model
    from quantlab.nn import ZOO_SCALES, build_mlp

    a = run.args
    depth, width = ZOO_SCALES[a.scale]
    depth = a.depth or depth
    width = a.width or width
    dims = [a.in_dim or width] + [width] * depth + [a.out_dim or width]
    model = build_mlp(dims, run.seed, dropout=a.dropout)
    path = run.output_path()
    nbytes = save_model(model, path)
    doc = {
        "model_file": path.name,
        "dims": dims,
        "param_count": model.param_count,
        "bytes": nbytes,
        "provenance": run.provenance(),
    }
    _write_json(path.with_name(path.name + ".json"), doc)
    run.emit(doc, _table(["file", "layers", "params", "bytes"], [[path.name, len(dims) - 1, model.param_count, nbytes]]))
    return doc


def cmd_gen_data(run: Run) -> dict:
    from quantlab.calibration import CalibrationSet
    from quantlab.model_io import save_calibration
    from quantlab.training import make_synthetic_task

    a = run.args
    d_in = a.dims[0]
    d_out = a.dims[1] if len(a.dims) == 2 else (4 if a.task == "blobs" else d_in)
    data = make_synthetic_task(a.task, (d_in, d_out), a.n, run.seed, noise=a.noise)
    path = run.output_path()
    save_calibration(CalibrationSet.from_array(data.inputs, run.seed), path)
    targets = data.targets.astype(np.float32)
    save_calibration(CalibrationSet.from_array(targets, run.seed), Path(f"{path}.targets"))
    doc = {
        "task": data.task,
        "kind": a.task,
        "generated_by": data.generated_by,
        "n": len(data),
        "input_dim": d_in,
        "output_dim": d_out,
        "provenance": run.provenance(),
    }
    _write_json(Path(f"{path}.json"), doc)
    run.emit(doc, _table(["file", "task", "n", "in", "out"], [[path.name, data.task, len(data), d_in, d_out]]))
    return doc


def cmd_train(run: Run) -> dict:
    from quantlab.model_io import save_model
    from quantlab.training import FakeQuantConfig, TrainConfig, train

    a = run.args
    model = run.load_model("--model", a.model)
    data = run.load_data("--data", a.data)
    fq = FakeQuantConfig(a.bits, a.scale_rule, a.refresh_every) if a.qat else None
    cfg = TrainConfig(
        learning_rate=a.lr,
        batch_size=a.batch,
        max_steps=a.steps,
        seed=run.seed,
        fake_quant=fq,
        conv_eps=a.conv_eps if a.conv_eps > 0 else None,
    )
    trained, log = train(model, data, cfg)
    path = run.output_path()
    save_model(trained, path)
    log_path = run.output_path("trainlog.jsonl")
    from quantlab.model_io import _write_atomic

    entries = [_clean(e) for e in log.entries]
    _write_atomic(log_path, "".join(json.dumps(e) + "\n" for e in entries).encode())
    losses = log.losses
    doc = {
        "model_file": path.name,
        "log_file": log_path.name,
        "steps": len(losses),
        "final_loss": losses[-1] if losses else None,
        "stop_reason": log.stop_reason,
        "train_config": cfg.to_dict(),
        "provenance": run.provenance(),
    }
    _write_json(run.output_path(STAGE_FILES["training"]), doc)
    run.emit(doc, _table(["steps", "final_loss", "stop_reason"], [[doc["steps"], doc["final_loss"], log.stop_reason]]))
    return doc


def cmd_calibrate(run: Run) -> dict:
    from quantlab.calibration import CalibrationSet, activation_stats, compute_range

    a = run.args
    model = run.load_model("--model", a.model)
    data = run.load_data("--data", a.data)
    cal = CalibrationSet.from_array(data.inputs)
    weights = [compute_range([l.dense_weight()], a.mode).to_dict() for l in model.layers]
    acts = [s.to_dict() for s in activation_stats(model, cal, a.mode)]
    doc = {"mode": str(a.mode), "weights": weights, "activations": acts, "provenance": run.provenance()}
    _write_json(run.output_path(), doc)
    rows = [[i, w["x_min"], w["x_max"], w["variance"], s["x_min"], s["x_max"]] for i, (w, s) in enumerate(zip(weights, acts))]
    run.emit(doc, _table(["layer", "w_min", "w_max", "w_var", "act_min", "act_max"], rows))
    return doc


def cmd_ptq(run: Run) -> dict:
    from quantlab.calibration import CalibrationSet
    from quantlab.model_io import save_model
    from quantlab.ptq import PtqConfig, loss_gap, run_ptq

    a = run.args
    model = run.load_model("--model", a.model)
    data = run.load_data("--data", a.data)
    cfg = PtqConfig(
        bits=a.bits,
        range_mode=a.mode,
        scale_rule=a.scale_rule,
        use_gamma=a.gamma,
        per_tensor=not a.global_range,
        scheme=a.scheme,
        quantize_biases=a.quantize_biases,
        target_alpha=a.target_alpha,
    )
    qmodel, report = run_ptq(model, CalibrationSet.from_array(data.inputs), cfg)
    path = run.output_path()
    save_model(qmodel, path)
    fp, q, gap = loss_gap(model, qmodel, data)
    doc = report.to_dict()
    doc.update(
        {
            "model_file": path.name,
            "ptq_config": cfg.to_dict(),
            "fp32_loss": fp.loss,
            "quantized_loss": q.loss,
            "relative_loss_increase": gap,
            "provenance": run.provenance(),
        }
    )
    _write_json(run.output_path(STAGE_FILES["ptq"]), doc)
    rows = [[l["index"], l["max_abs"], l["mse"], l["relative_eq"], l["gamma"]] for l in doc["layers"]]
    lines = _table(["layer", "max_abs", "mse", "eps_q", "gamma"], rows)
    lines += ["", *_table(["original_B", "quantized_B", "alpha", "fp32_loss", "quant_loss"],
                          [[report.original_bytes, report.quantized_bytes, report.alpha_achieved, fp.loss, q.loss]])]
    run.emit(doc, lines)
    return doc


def cmd_allocate(run: Run) -> dict:
    from quantlab.mixed_precision import estimate_sensitivity, objective_value, solve_allocation

    a = run.args
    model = run.load_model("--model", a.model)
    data = run.load_data("--data", a.data)
    if a.bmin > a.bmax:
        raise ValidationError("--bmin must not exceed --bmax")
    sens = estimate_sensitivity(model, data, a.probe_bits, a.method)
    plan = solve_allocation(sens, a.budget, a.bmin, a.bmax)
    doc = plan.to_dict()
    doc["method"] = a.method
    doc["objective"] = objective_value(sens, plan.bits, model)
    doc["provenance"] = run.provenance()
    _write_json(run.output_path(), doc)
    rows = [[l["layer_index"], l["alpha"], l["sigma2"], l["real_bits"], l["bits"]] for l in doc["layers"]]
    lines = _table(["layer", "alpha", "sigma2", "real_bits", "bits"], rows)
    lines.append(f"budget {plan.budget}  total {sum(plan.bits)}  feasible {plan.feasible}")
    run.emit(doc, lines)
    return doc


def cmd_analyze(run: Run) -> dict:
    from quantlab import analysis

    a = run.args
    fp32 = run.load_model("--model", a.model)
    quant = run.load_model("--quantized", a.quantized)
    data = run.load_data("--data", a.data)
    if [l.weight.shape for l in fp32.layers] != [l.dense_weight().shape for l in quant.layers]:
        raise ValidationError(f"--quantized {a.quantized}: layer shapes do not match --model {a.model}")
    budget = analysis.error_budget(fp32, quant, data.inputs[:ANALYZE_PROBES])
    batch = data.inputs
    c_f = analysis.counted_macs(fp32, batch)
    estimate = {
        "counted_macs": c_f,
        "formula_macs": analysis.mlp_macs_estimate(fp32, len(batch)),
        "rows": len(batch),
    }
    doc = {
        "error_budget": budget.to_dict(),
        "cost": {"estimate": estimate, "comparison": analysis.cost_comparison(float(c_f))},
        "size": analysis.size_report(fp32, quant),
        "byte_accounting": analysis.byte_accounting_note(fp32),
        "provenance": run.provenance(),
    }
    _write_json(run.output_path(), doc)
    size = doc["size"]
    lines = _table(["original_B", "quantized_B", "reduction_%", "published_%"],
                   [[size["original"], size["quantized"], size["reduction_pct"], size["published_reduction_pct"]]])
    cost_rows = [[r["config"], r["formula"]["reduction_pct"], r["published_reduction_pct"], r["consistent_with_formula"]]
                 for r in doc["cost"]["comparison"]]
    lines += ["", *_table(["config", "formula_%", "published_%", "consistent"], cost_rows)]
    lines += ["", f"bound E_T {budget.bound_E_T:.6g}  measured {_fmt(budget.measured_rel_error)}  ({budget.structure})"]
    run.emit(doc, lines)
    return doc


def _read_stage(run: Run, directory: Path, name: str):
    p = directory / name
    if not p.is_file():
        return None
    run.read_input("--dir", p)
    try:
        return json.loads(p.read_text())
    except ValueError as exc:
        raise ValidationError(f"--dir {p}: {exc}") from None


def cmd_report(run: Run) -> dict:
    from quantlab import analysis

    directory = Path(run.args.dir)
    if not directory.is_dir():
        raise ValidationError(f"--dir {directory}: not a directory")
    ptq = _read_stage(run, directory, STAGE_FILES["ptq"])
    tr = _read_stage(run, directory, STAGE_FILES["training"])
    plan = _read_stage(run, directory, STAGE_FILES["allocation"])
    an = _read_stage(run, directory, STAGE_FILES["analysis"])
    if ptq is not None:
        ptq = {k: v for k, v in ptq.items() if k != "provenance"}
    training = None
    if tr is not None:
        training = {"steps": tr["steps"], "final_loss": tr["final_loss"], "stop_reason": tr["stop_reason"]}
    if plan is not None:
        plan = {k: v for k, v in plan.items() if k != "provenance"}
    doc = analysis.experiment_report(
        ptq=ptq,
        training=training,
        allocation=plan,
        cost=an["cost"] if an else None,
        error_budget=an["error_budget"] if an else None,
        size=an["size"] if an else None,
        provenance=run.provenance(),
    )
    doc = _clean(doc)
    analysis.validate_report(doc)
    path = Path(run.args.out_file)
    if not path.is_absolute():
        path = directory / path
    _write_json(path, doc)
    present = [k for k in ("ptq", "training", "allocation", "cost", "error_budget", "size") if doc[k] is not None]
    run.emit(doc, [f"wrote {path}", "sections: " + ", ".join(present)])
    return doc


COMMANDS = {
    "gen-model": cmd_gen_model,
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "calibrate": cmd_calibrate,
    "ptq": cmd_ptq,
    "allocate": cmd_allocate,
    "analyze": cmd_analyze,
    "report": cmd_report,
}


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else argv
    try:
        args = build_parser().parse_args(list(argv))
        run = Run(args)
        threads()
        COMMANDS[args.command](run)
    except ValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except TrainingDivergedError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except QuantLabError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except Exception as exc:  # anything else is a runtime failure
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
