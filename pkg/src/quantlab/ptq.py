"""Post-training quantization of a trained float32 model."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from quantlab.calibration import (
    CalibrationSet,
    MinMax,
    Percentile,
    RangeMode,
    ScaleRule,
    TensorStats,
    activation_stats,
    compute_gamma,
    compute_range,
    quant_params_for,
)
from quantlab.errors import GammaUndefinedError, InputError
from quantlab.nn import ModelGraph
from quantlab.quantizer import (
    QuantError,
    Scheme,
    check_bits,
    dequantize,
    measure_error,
    quantize_affine,
    quantize_log,
)
from quantlab.training import EvalMetrics, LabeledSet, evaluate_model

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class PtqConfig:
    bits: int = 8
    range_mode: RangeMode = MinMax()
    scale_rule: ScaleRule = ScaleRule.ALG1
    use_gamma: bool = False
    per_tensor: bool = True
    scheme: Scheme = Scheme.AFFINE
    signed: bool = False
    quantize_biases: bool = False
    target_alpha: Optional[float] = None  # requested compression ratio, if any

    def __post_init__(self):
        check_bits(self.bits)
        object.__setattr__(self, "scale_rule", ScaleRule(self.scale_rule))
        object.__setattr__(self, "scheme", Scheme(self.scheme))
        if not isinstance(self.range_mode, (MinMax, Percentile)):
            raise InputError(f"bad range mode {self.range_mode!r}")
        if self.target_alpha is not None and not 0 < self.target_alpha <= 1:
            raise InputError("target alpha must be in (0, 1]")

    def to_dict(self) -> dict:
        return {
            "bits": self.bits,
            "range_mode": str(self.range_mode),
            "scale_rule": self.scale_rule.value,
            "use_gamma": self.use_gamma,
            "per_tensor": self.per_tensor,
            "scheme": self.scheme.value,
            "signed": self.signed,
            "quantize_biases": self.quantize_biases,
            "target_alpha": self.target_alpha,
        }


@dataclass
class PtqReport:
    errors: list  # QuantError per layer
    gammas: list
    original_bytes: int
    quantized_bytes: int
    bound_product: float
    activation_stats: list = field(default_factory=list)
    target_alpha: Optional[float] = None

    @property
    def alpha_achieved(self) -> float:
        return self.quantized_bytes / self.original_bytes

    @property
    def alpha_violated(self) -> Optional[bool]:
        """Whether the size constraint ``size(q) < α·size(fp32)`` fails."""
        if self.target_alpha is None:
            return None
        return self.alpha_achieved >= self.target_alpha

    def to_dict(self) -> dict:
        return {
            "layers": [
                {
                    "index": i,
                    "max_abs": e.max_abs,
                    "mse": e.mse,
                    "relative_eq": e.relative_eq,
                    "norm": e.norm,
                    "gamma": g,
                }
                for i, (e, g) in enumerate(zip(self.errors, self.gammas))
            ],
            "original_bytes": self.original_bytes,
            "quantized_bytes": self.quantized_bytes,
            "alpha_achieved": self.alpha_achieved,
            "target_alpha": self.target_alpha,
            "alpha_violated": self.alpha_violated,
            "bound_product": self.bound_product,
            "activation_stats": [s.to_dict() for s in self.activation_stats],
        }


def _quantize_tensor(t: np.ndarray, cfg: PtqConfig, stats: Optional[TensorStats]):
    """Quantize one tensor; returns (QuantizedTensor, gamma)."""
    if cfg.scheme is Scheme.LOG:
        qt = quantize_log(t, cfg.bits)
    else:
        p = quant_params_for(t, cfg.bits, cfg.scale_rule, stats, cfg.signed)
        qt = quantize_affine(t, p)
    gamma = 1.0
    if cfg.use_gamma:
        try:
            gamma = compute_gamma(t, dequantize(qt))
        except GammaUndefinedError:
            logger.info("gamma undefined for an all-zero quantized tensor, using 1.0")
        qt = type(qt)(qt.params.with_gamma(gamma), qt.shape, qt.payload)
    return qt, qt.params.gamma


def run_ptq(model: ModelGraph, cal: Optional[CalibrationSet], cfg: PtqConfig) -> tuple[ModelGraph, PtqReport]:
    """Quantize every weight matrix of ``model``; the input model is not modified.

    Ranges come from each weight tensor (or from all weights jointly when
    ``cfg.per_tensor`` is false). The calibration set feeds the activation
    statistics recorded in the report.
    """
    from quantlab.analysis import error_accumulation_bound
    from quantlab.model_io import model_size

    if any(l.is_quantized for l in model.layers):
        raise InputError("model is already quantized")
    if model.has_nonfinite():
        raise InputError("model contains NaN or Inf values")
    global_stats = None
    if not cfg.per_tensor:
        global_stats = compute_range([l.weight for l in model.layers], cfg.range_mode)
    out = model.copy()
    errors, gammas = [], []
    for layer in out.layers:
        w = layer.weight
        stats = global_stats if global_stats is not None else compute_range([w], cfg.range_mode)
        qt, gamma = _quantize_tensor(w, cfg, stats)
        layer.weight = qt
        errors.append(measure_error(w, qt))
        gammas.append(gamma)
        if cfg.quantize_biases:
            b = layer.bias
            bstats = global_stats if global_stats is not None else compute_range([b], cfg.range_mode)
            layer.bias, _ = _quantize_tensor(b, cfg, bstats)
    act = activation_stats(model, cal) if cal is not None else []
    report = PtqReport(
        errors=errors,
        gammas=gammas,
        original_bytes=model_size(model),
        quantized_bytes=model_size(out),
        bound_product=error_accumulation_bound([e.relative_eq for e in errors]),
        activation_stats=act,
        target_alpha=cfg.target_alpha,
    )
    return out, report


def loss_gap(fp32: ModelGraph, quantized: ModelGraph, data: LabeledSet) -> tuple[EvalMetrics, EvalMetrics, float]:
    """Evaluate both models and return the relative loss increase."""
    a = evaluate_model(fp32, data)
    b = evaluate_model(quantized, data)
    return a, b, (b.loss - a.loss) / a.loss if a.loss > 0 else float("inf")


__all__ = ["PtqConfig", "PtqReport", "QuantError", "evaluate_model", "loss_gap", "run_ptq"]
