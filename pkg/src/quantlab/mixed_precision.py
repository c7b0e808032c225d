"""Per-layer bit allocation under a total bit budget.

Real-valued allocations follow ``b_l = ½ log2(α_l σ_l² / λ)``; λ is found by
bisection so the clamped allocations meet the budget, then the plan is
rounded to integers by largest fractional remainder.
"""

from __future__ import annotations

import enum
import itertools
import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from quantlab.calibration import ScaleRule, quant_params_for
from quantlab.errors import InputError, SearchSpaceError
from quantlab.nn import Mode, ModelGraph, backward, forward, LOSSES
from quantlab.quantizer import check_bits, fake_quantize, quantize_affine, relative_error
from quantlab.tensor import variance
from quantlab.training import LabeledSet, evaluate_model

ALPHA_FLOOR = 1e-8
SIGMA2_FLOOR = 1e-12
BISECT_ITERS = 200
GRAD_PROBE_ROWS = 4096


class SensitivityMethod(str, enum.Enum):
    LOSS_PROBE = "probe"
    GRAD_NORM_PROXY = "gradproxy"


@dataclass(frozen=True)
class LayerSensitivity:
    layer_index: int
    alpha: float
    sigma2: float
    method: SensitivityMethod = SensitivityMethod.LOSS_PROBE
    raw: float = 0.0  # unnormalized score before flooring

    def __post_init__(self):
        if not (self.alpha > 0 and self.sigma2 > 0):
            raise InputError("sensitivity alpha and sigma2 must be positive")

    @property
    def weight(self) -> float:
        return self.alpha * self.sigma2


def _normalize(raw: Sequence[float]) -> list:
    floored = [max(r, ALPHA_FLOOR) for r in raw]
    mean = sum(floored) / len(floored)
    return [f / mean for f in floored]


def estimate_sensitivity(
    model: ModelGraph,
    data: LabeledSet,
    probe_bits: int = 4,
    method: SensitivityMethod = SensitivityMethod.LOSS_PROBE,
    rule: ScaleRule = ScaleRule.ALG1,
) -> list:
    """Layer sensitivities normalized to mean 1, with weight variances.

    ``probe``: loss increase when only layer l is quantized at ``probe_bits``.
    ``gradproxy``: mean ``|∂L/∂W ⊙ W|`` on (up to 4096 rows of) ``data``.
    Scores are floored at 1e-8 before normalization.
    """
    probe_bits = check_bits(probe_bits)
    method = SensitivityMethod(method)
    if model.has_nonfinite():
        raise InputError("model contains NaN or Inf values")
    if method is SensitivityMethod.LOSS_PROBE:
        base = evaluate_model(model, data).loss
        raw = []
        for i, layer in enumerate(model.layers):
            probe = model.copy()
            w = probe.layers[i].dense_weight()
            probe.layers[i].weight = quantize_affine(w, quant_params_for(w, probe_bits, rule))
            raw.append(evaluate_model(probe, data).loss - base)
    else:
        xb, yb = data.inputs[:GRAD_PROBE_ROWS], data.targets[:GRAD_PROBE_ROWS]
        out, cache = forward(model, xb, Mode.EVAL)
        _, grad = LOSSES[data.loss_name](out, yb)
        grads = backward(model, cache, grad)
        raw = [
            float(np.mean(np.abs(dw.astype(np.float64) * l.dense_weight())))
            for (dw, _), l in zip(grads, model.layers)
        ]
    if not all(math.isfinite(r) for r in raw):
        raise InputError("sensitivity probe produced non-finite values")
    alphas = _normalize(raw)
    return [
        LayerSensitivity(i, a, max(variance(l.dense_weight()), SIGMA2_FLOOR), method, r)
        for i, (a, r, l) in enumerate(zip(alphas, raw, model.layers))
    ]


def allocate_bits_closed_form(sens: Sequence[LayerSensitivity], lam: float) -> list:
    if lam <= 0:
        raise InputError("lambda must be positive")
    return [0.5 * math.log2(s.alpha * s.sigma2 / lam) for s in sens]


@dataclass
class AllocationPlan:
    bits: list
    lam: Optional[float]
    budget: int
    real_bits: list
    feasible: bool
    sensitivities: list
    b_min: int = 2
    b_max: int = 16

    def to_dict(self) -> dict:
        return {
            "layers": [
                {
                    "layer_index": s.layer_index,
                    "alpha": s.alpha,
                    "sigma2": s.sigma2,
                    "real_bits": rb,
                    "bits": b,
                }
                for s, rb, b in zip(self.sensitivities, self.real_bits, self.bits)
            ],
            "lambda": self.lam,
            "budget": self.budget,
            "b_min": self.b_min,
            "b_max": self.b_max,
            "total_bits": sum(self.bits),
            "feasible": self.feasible,
        }


def _clamped_sum(log_w: np.ndarray, t: float, b_min: int, b_max: int) -> float:
    return float(np.clip(0.5 * (log_w - t), b_min, b_max).sum())


def solve_allocation(
    sens: Sequence[LayerSensitivity], budget: int, b_min: int = 2, b_max: int = 16
) -> AllocationPlan:
    """Integer bit plan with ``Σ b_l ≤ budget`` and ``b_min ≤ b_l ≤ b_max``.

    An infeasible budget (below ``L · b_min``) yields a plan at ``b_min``
    with ``feasible=False`` rather than an exception.
    """
    b_min, b_max = check_bits(b_min), check_bits(b_max)
    if b_min > b_max:
        raise InputError("b_min must not exceed b_max")
    if not sens:
        raise InputError("need at least one layer sensitivity")
    n = len(sens)
    log_w = np.array([math.log2(s.weight) for s in sens])
    t_lo = float(log_w.min()) - 2 * b_max  # every layer at b_max
    t_hi = float(log_w.max()) - 2 * b_min  # every layer at b_min
    if budget < n * b_min:
        real = list(np.clip(0.5 * (log_w - t_hi), b_min, b_max))
        return AllocationPlan([b_min] * n, 2.0**t_hi, budget, real, False, list(sens), b_min, b_max)
    if budget >= n * b_max:
        t = t_lo
    else:
        # invariant: clamped sum at t_lo >= budget >= clamped sum at t_hi
        for _ in range(BISECT_ITERS):
            mid = 0.5 * (t_lo + t_hi)
            if mid in (t_lo, t_hi):
                break
            if _clamped_sum(log_w, mid, b_min, b_max) >= budget:
                t_lo = mid
            else:
                t_hi = mid
        t = t_hi
    real = np.clip(0.5 * (log_w - t), b_min, b_max)
    bits = np.floor(real).astype(int)
    leftover = budget - int(bits.sum())
    frac = real - bits
    # largest remainder first, lower index on ties
    for i in sorted(range(n), key=lambda i: (-frac[i], i)):
        if leftover <= 0:
            break
        if bits[i] < b_max:
            bits[i] += 1
            leftover -= 1
    bits = [int(b) for b in bits]
    feasible = sum(bits) <= budget and all(b_min <= b <= b_max for b in bits)
    return AllocationPlan(bits, 2.0**t, budget, [float(r) for r in real], feasible, list(sens), b_min, b_max)


def layer_error(model: ModelGraph, index: int, bits: int, rule: ScaleRule = ScaleRule.ALG1) -> float:
    """Relative error ``‖W − Ŵ‖₂ / ‖W‖₂`` of one layer quantized at ``bits``."""
    w = model.layers[index].dense_weight()
    if not np.any(w):
        return 0.0
    wq, _ = fake_quantize(w, quant_params_for(w, bits, rule))
    return relative_error(w, wq)[0]


def objective_value(
    sens: Sequence[LayerSensitivity], bits: Sequence[int], model: ModelGraph, rule: ScaleRule = ScaleRule.ALG1
) -> float:
    """``Σ α_l ε_l`` with each ε measured by actually quantizing layer l."""
    return sum(s.alpha * layer_error(model, s.layer_index, b, rule) for s, b in zip(sens, bits))


def exhaustive_allocation_oracle(
    sens: Sequence[LayerSensitivity],
    model: ModelGraph,
    budget: int,
    b_choices: Sequence[int] = (2, 4, 8),
    max_space: int = 100_000,
    rule: ScaleRule = ScaleRule.ALG1,
) -> tuple[list, float]:
    """Best assignment from ``b_choices`` per layer under the budget, by enumeration."""
    n = len(sens)
    if len(b_choices) ** n > max_space:
        raise SearchSpaceError(f"{len(b_choices)}^{n} assignments exceed the limit of {max_space}")
    errs = {(s.layer_index, b): layer_error(model, s.layer_index, b, rule) for s in sens for b in b_choices}
    best, best_val = None, math.inf
    for combo in itertools.product(sorted(b_choices), repeat=n):
        if sum(combo) > budget:
            continue
        val = sum(s.alpha * errs[(s.layer_index, b)] for s, b in zip(sens, combo))
        if val < best_val:
            best, best_val = list(combo), val
    if best is None:
        raise SearchSpaceError("no assignment fits the budget")
    return best, best_val
