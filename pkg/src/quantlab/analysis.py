"""Error accumulation, cost and size models, and the consolidated report."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from importlib import resources
from typing import Iterable, Optional

import numpy as np

from quantlab import __version__
from quantlab.errors import DomainError, UnsupportedStructureError
from quantlab.nn import Mode, ModelGraph, forward
from quantlab.quantizer import relative_error
from quantlab.tensor import power_iteration

REPORT_VERSION = 1
# The accumulation check needs tighter singular values than the default diagnostics.
VERIFY_POWER_ITERS = 5000
VERIFY_POWER_TOL = 1e-12

# Values printed in the source tables; measurements, not formula outputs.
PUBLISHED_VALUES = {
    "cost_reduction_pct": {"int8": 40.0, "int4": 65.0},
    "size_reduction_pct": 68.0,
    "size_table_mb": {"fp32": [220, 70], "ptq_without_gamma": [220, 65], "ptq_with_gamma": [220, 70]},
    "param_table": [
        {"config": "small", "hidden_layers": 10, "hidden_units": 1024, "params": "10M", "original_gb": 0.22, "quantized_gb": 0.07},
        {"config": "medium", "hidden_layers": 20, "hidden_units": 2048, "params": "100M", "original_gb": 2.2, "quantized_gb": 0.7},
        {"config": "large", "hidden_layers": 50, "hidden_units": 4096, "params": "1B", "original_gb": 22.0, "quantized_gb": 7.0},
    ],
}

NOT_REPRODUCED = [
    "perplexity/BLEU under the scaling factor (GPT-scale text generation)",
    "1B-parameter training (large configuration)",
    "edge-device throughput, power and latency",
]


def complexity_forward(n_params: int, d_model: int, seq_len: int) -> float:
    """Forward-pass cost unit ``N · d_model · L_seq`` in float arithmetic."""
    for v in (n_params, d_model, seq_len):
        if v <= 0:
            raise DomainError("complexity arguments must be positive")
    return float(n_params) * float(d_model) * float(seq_len)


def mlp_macs_estimate(model: ModelGraph, batch: int) -> float:
    """Dense-MLP instance of the complexity model.

    Each token touches every parameter once, so the model width enters with
    exponent zero: ``N · 1 · L_seq`` with ``L_seq`` the number of rows.
    """
    return complexity_forward(model.param_count, 1, batch)


def counted_macs(model: ModelGraph, batch) -> int:
    _, cache = forward(model, batch, Mode.EVAL)
    return cache.macs


@dataclass(frozen=True)
class CostEstimate:
    flops_fp: float
    c_q: float
    reduction_pct: float
    b_w: int
    b_a: int
    w_0: int = 32
    a_0: int = 32

    def to_dict(self) -> dict:
        return {
            "flops_fp": self.flops_fp,
            "c_q": self.c_q,
            "reduction_pct": self.reduction_pct,
            "b_w": self.b_w,
            "b_a": self.b_a,
            "w_0": self.w_0,
            "a_0": self.a_0,
        }


def cost_model(b_w: int, b_a: int, w_0: int, a_0: int, c_f: float) -> CostEstimate:
    """Quantized cost ``C_q = (b_w·b_a)/(w_0·a_0) · C_f``."""
    if min(b_w, b_a, w_0, a_0) <= 0 or c_f <= 0:
        raise DomainError("cost model arguments must be positive")
    c_q = (b_w * b_a) / (w_0 * a_0) * c_f
    return CostEstimate(float(c_f), c_q, 100.0 * (1.0 - c_q / c_f), b_w, b_a, w_0, a_0)


def error_accumulation_bound(eps: Iterable[float]) -> float:
    """``Π(1 + ε_l) − 1``; zero for an empty chain.

    Accumulated as ``e ← e + ε + e·ε`` so small errors are not lost to the
    cancellation in ``(1 + ε) − 1``.
    """
    total = 0.0
    for e in eps:
        if e < 0:
            raise DomainError(f"layer errors must be nonnegative, got {e}")
        total = total + e + total * e
    return total


@dataclass
class ErrorBudget:
    per_layer_eps: list
    bound_E_T: float
    measured_rel_error: Optional[float]
    structure: str = "linear"

    @property
    def holds(self) -> Optional[bool]:
        if self.measured_rel_error is None:
            return None
        return self.measured_rel_error <= self.bound_E_T + 1e-6

    def to_dict(self) -> dict:
        return {
            "per_layer_eps": list(self.per_layer_eps),
            "bound_E_T": self.bound_E_T,
            "measured_rel_error": self.measured_rel_error,
            "structure": self.structure,
            "holds": self.holds,
        }


def _norm2(w: np.ndarray) -> float:
    return power_iteration(w, VERIFY_POWER_ITERS, VERIFY_POWER_TOL)[0]


def layer_eps(fp32: ModelGraph, quantized: ModelGraph) -> list:
    return [
        relative_error(a.dense_weight(), b.dense_weight())[0]
        for a, b in zip(fp32.layers, quantized.layers)
    ]


def verify_accumulation(fp32: ModelGraph, quantized: ModelGraph, probes) -> ErrorBudget:
    """Measure the composed weight-chain error against the product bound.

    The measured quantity is ``max_x ‖(ΠŴ)x − (ΠW)x‖ / (Π‖W_l‖·‖x‖)`` over the
    probe inputs, computed in float64. Biases are not part of the chain.
    """
    if not (fp32.is_linear() and quantized.is_linear()):
        raise UnsupportedStructureError("error accumulation check needs a model without nonlinearities")
    ws = [np.asarray(l.dense_weight(), dtype=np.float64) for l in fp32.layers]
    wq = [np.asarray(l.dense_weight(), dtype=np.float64) for l in quantized.layers]
    norms = [_norm2(w) for w in ws]
    eps = [(_norm2(w - q) / n if n > 0 else 0.0) for w, q, n in zip(ws, wq, norms)]
    bound = error_accumulation_bound(eps)
    denom_w = math.prod(norms)
    worst = 0.0
    for x in probes:
        x = np.asarray(x, dtype=np.float64).ravel()
        y, yq = x, x
        for w, q in zip(ws, wq):
            y, yq = w @ y, q @ yq
        denom = denom_w * float(np.linalg.norm(x))
        if denom > 0:
            worst = max(worst, float(np.linalg.norm(yq - y)) / denom)
    return ErrorBudget(eps, bound, worst, "linear")


def error_budget(fp32: ModelGraph, quantized: ModelGraph, probes) -> ErrorBudget:
    """Product bound for any model; the measured term only for linear chains."""
    if fp32.is_linear():
        return verify_accumulation(fp32, quantized, probes)
    eps = layer_eps(fp32, quantized)
    return ErrorBudget(eps, error_accumulation_bound(eps), None, "nonlinear")


def model_size(model: ModelGraph) -> int:
    from quantlab.model_io import model_size as _size

    return _size(model)


def size_report(fp32: ModelGraph, quantized: ModelGraph) -> dict:
    original = model_size(fp32)
    q = model_size(quantized)
    return {
        "original": original,
        "quantized": q,
        "reduction_pct": 100.0 * (1.0 - q / original),
        "alpha": q / original,
        "published_reduction_pct": PUBLISHED_VALUES["size_reduction_pct"],
    }


def cost_comparison(c_f: float) -> list:
    """Formula cost for INT8/INT4 next to the table's measured reductions."""
    rows = []
    for label, bits in (("int8", 8), ("int4", 4)):
        est = cost_model(bits, bits, 32, 32, c_f)
        published = PUBLISHED_VALUES["cost_reduction_pct"][label]
        rows.append(
            {
                "config": label,
                "formula": est.to_dict(),
                "published_reduction_pct": published,
                "consistent_with_formula": math.isclose(est.reduction_pct, published, abs_tol=0.5),
            }
        )
    return rows


def byte_accounting_note(model: ModelGraph) -> dict:
    """Bytes per parameter of the float32 container versus the parameter table."""
    fp = model_size(model)
    small = PUBLISHED_VALUES["param_table"][0]
    return {
        "container_bytes_per_param": fp / model.param_count,
        "published_small_bytes_per_param": small["original_gb"] * 1e9 / 10e6,
        "reproducible": False,
    }


_SECTIONS = ("ptq", "training", "allocation", "cost", "error_budget", "size")


def load_schema() -> dict:
    text = resources.files("quantlab").joinpath("schemas/experiment_report.schema.json").read_text()
    return json.loads(text)


def experiment_report(
    ptq: Optional[dict] = None,
    training: Optional[dict] = None,
    allocation: Optional[dict] = None,
    cost: Optional[dict] = None,
    error_budget: Optional[dict] = None,
    size: Optional[dict] = None,
    provenance: Optional[dict] = None,
) -> dict:
    """Merge stage outputs into one versioned document; missing stages are null."""
    values = dict(ptq=ptq, training=training, allocation=allocation, cost=cost, error_budget=error_budget, size=size)
    doc = {"report_version": REPORT_VERSION, "tool_version": __version__}
    for key in _SECTIONS:
        doc[key] = values[key]
    doc["published"] = {
        "label": "published measurements, not reproduced",
        "values": PUBLISHED_VALUES,
        "not_reproducible": NOT_REPRODUCED,
    }
    doc["provenance"] = provenance
    return doc


def validate_report(doc: dict) -> None:
    import jsonschema

    jsonschema.validate(doc, load_schema())
