"""Range and moment statistics, the second-moment correction γ, and the
calibration-set container.
"""

from __future__ import annotations

import enum
import logging
import math
from dataclasses import dataclass
from typing import Iterable, Union

import numpy as np

from quantlab.errors import (
    DegenerateRangeError,
    DimensionError,
    DomainError,
    GammaUndefinedError,
    InputError,
)
from quantlab.quantizer import (
    QuantParams,
    check_bits,
    scale_from_range,
    scale_mse_oracle,
    scale_theorem1,
    zero_point_for,
)

logger = logging.getLogger(__name__)

ACTIVATION_CHUNK = 256


@dataclass(frozen=True)
class MinMax:
    def __str__(self):
        return "minmax"


@dataclass(frozen=True)
class Percentile:
    p: float

    def __post_init__(self):
        if not 50.0 < self.p <= 100.0:
            raise DomainError(f"percentile must be in (50, 100], got {self.p}")

    def __str__(self):
        return f"pct:{self.p:g}"


RangeMode = Union[MinMax, Percentile]


def parse_range_mode(text: str) -> RangeMode:
    """Parse ``minmax`` or ``pct:P``."""
    if text == "minmax":
        return MinMax()
    if text.startswith("pct:"):
        try:
            return Percentile(float(text[4:]))
        except ValueError as exc:
            raise DomainError(f"bad percentile mode {text!r}: {exc}") from None
    raise DomainError(f"unknown range mode {text!r}; expected minmax or pct:P")


@dataclass(frozen=True)
class TensorStats:
    x_min: float
    x_max: float
    mean: float
    variance: float
    second_moment: float
    count: int

    def to_dict(self) -> dict:
        return {
            "x_min": self.x_min,
            "x_max": self.x_max,
            "mean": self.mean,
            "variance": self.variance,
            "second_moment": self.second_moment,
            "count": self.count,
        }


class _Moments:
    """Streaming count/mean/M2 with Chan's pairwise merge, plus min and max."""

    def __init__(self):
        self.n = 0
        self.mean = 0.0
        self.m2 = 0.0
        self.sumsq = 0.0
        self.lo = math.inf
        self.hi = -math.inf

    def update(self, v: np.ndarray):
        if v.size == 0:
            return
        nb = v.size
        mb = float(v.mean())
        m2b = float(np.sum((v - mb) ** 2))
        n = self.n + nb
        delta = mb - self.mean
        self.mean += delta * nb / n
        self.m2 += m2b + delta * delta * self.n * nb / n
        self.n = n
        self.sumsq += float(np.dot(v, v))
        self.lo = min(self.lo, float(v.min()))
        self.hi = max(self.hi, float(v.max()))


def compute_range(values: Iterable, mode: RangeMode = MinMax()) -> TensorStats:
    """Range and moments over a stream of tensors.

    ``Percentile(p)`` clips the range to ``±percentile(|x|, p)``; the moments
    always describe the unclipped data.
    """
    if isinstance(values, np.ndarray):
        values = [values]
    acc = _Moments()
    kept = []
    for t in values:
        v = np.asarray(t, dtype=np.float64).ravel()
        acc.update(v)
        if isinstance(mode, Percentile):
            kept.append(np.abs(v))
    if acc.n == 0:
        raise DomainError("cannot compute a range over an empty stream")
    lo, hi = acc.lo, acc.hi
    if isinstance(mode, Percentile):
        bound = float(np.percentile(np.concatenate(kept), mode.p))
        lo, hi = max(lo, -bound), min(hi, bound)
    variance = acc.m2 / acc.n
    return TensorStats(lo, hi, acc.mean, variance, acc.sumsq / acc.n, acc.n)


def compute_gamma(reference, quantized_dequantized) -> float:
    """``sqrt(E[x²] / E[Q(x)²])``: the post-scale restoring the second moment."""
    x = np.asarray(reference, dtype=np.float64)
    q = np.asarray(quantized_dequantized, dtype=np.float64)
    if x.shape != q.shape:
        raise DimensionError(f"shape {x.shape} does not match {q.shape}")
    if x.size == 0:
        raise DomainError("gamma of an empty tensor is undefined")
    eq = float(np.mean(q * q))
    if eq == 0.0:
        raise GammaUndefinedError("quantized tensor is all zeros; gamma is undefined")
    return math.sqrt(float(np.mean(x * x)) / eq)


def layer_weight_stats(model) -> list[TensorStats]:
    """Per-layer statistics of the FP32 weight matrices (biases excluded)."""
    if not model.layers:
        raise InputError("model has no layers")
    return [compute_range([layer.dense_weight()]) for layer in model.layers]


def activation_stats(model, cal: "CalibrationSet", mode: RangeMode = MinMax()) -> list[TensorStats]:
    """Per-layer post-activation statistics from FP32 eval passes over ``cal``."""
    from quantlab.nn import Mode, forward

    outputs = [[] for _ in model.layers]
    rows = cal.as_batch().reshape(-1, model.input_dim)
    # each output row depends only on its input row, so chunking is exact
    for start in range(0, len(rows), ACTIVATION_CHUNK):
        _, cache = forward(model, rows[start : start + ACTIVATION_CHUNK], Mode.EVAL)
        for i, h in enumerate(cache.outputs):
            outputs[i].append(h)
    return [compute_range(o, mode) for o in outputs]


@dataclass
class CalibrationSet:
    samples: list
    source_seed: int | None = None

    def __post_init__(self):
        if not self.samples:
            raise InputError("calibration set must be nonempty")
        self.samples = [np.ascontiguousarray(s, dtype=np.float32) for s in self.samples]
        shape = self.samples[0].shape
        for s in self.samples:
            if s.shape != shape:
                raise DimensionError(f"calibration samples differ in shape: {shape} vs {s.shape}")

    @property
    def sample_shape(self) -> tuple[int, ...]:
        return self.samples[0].shape

    def as_batch(self) -> np.ndarray:
        return np.stack(self.samples).reshape(len(self.samples), -1)

    @classmethod
    def from_array(cls, arr, source_seed=None) -> "CalibrationSet":
        arr = np.asarray(arr, dtype=np.float32)
        return cls(list(arr), source_seed)


class ScaleRule(str, enum.Enum):
    ALG1 = "alg1"  # full-range step (x_max - x_min)/(2^b - 1)
    THM1 = "thm1"  # closed form 2(max - min)/(2^b - 1)
    MSE = "mse"  # brute-force MSE search


def quant_params_for(
    w,
    bits: int,
    rule: ScaleRule = ScaleRule.ALG1,
    stats: TensorStats | None = None,
    signed: bool = False,
    gamma: float = 1.0,
) -> QuantParams:
    """Affine parameters for one tensor.

    ``stats`` supplies the range (defaults to the tensor's own min/max).
    Constant tensors fall back to the widened full-range rule for every
    ``rule`` since the other rules have no defined scale there.
    """
    bits = check_bits(bits)
    rule = ScaleRule(rule)
    if stats is None:
        stats = compute_range([w])
    x_min, x_max = stats.x_min, stats.x_max
    scale, z = scale_from_range(x_min, x_max, bits, signed)
    if rule is not ScaleRule.ALG1 and x_max > x_min:
        try:
            if rule is ScaleRule.THM1:
                scale = scale_theorem1(np.array([x_min, x_max]), bits)
            else:
                scale = scale_mse_oracle(w, bits, signed=signed)
            z = zero_point_for(x_min, scale, bits, signed)
        except DegenerateRangeError:
            logger.info("degenerate tensor under %s, using full-range scale", rule.value)
    return QuantParams(scale, z, bits, signed, gamma)
