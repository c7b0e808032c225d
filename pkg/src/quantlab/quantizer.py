"""Affine and power-of-two quantizers, scale selection and error metrics.

Affine codes use ``q = clamp(round(x / s) + z, qmin, qmax)`` with rounding
half away from zero. Dequantized values are ``γ · s · (q − z)``, where the
product ``s · (q − z)`` is formed exactly and rounded to float32 once, and
γ is then applied as a float32 multiply.

Log codes store one sign bit above a ``b − 1`` bit magnitude field. Magnitude
code 0 is zero; codes ``1 .. 2^(b−1) − 1`` are consecutive exponents ending
at ``e_max = ⌊log2 max|x|⌋``.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np

from quantlab._backend import kernels
from quantlab.errors import DegenerateRangeError, DimensionError, FormatError, ParameterError
from quantlab.tensor import as_tensor, frobenius_norm, spectral_norm

MIN_BITS = 2
MAX_BITS = 16
DEGENERATE_HALF_WIDTH = 1e-6
# Smallest float32 subnormal exponent: 2**-149.
LOG_EXP_FLOOR = -149


class Scheme(str, enum.Enum):
    AFFINE = "affine"
    LOG = "log"


def check_bits(bits: int) -> int:
    if isinstance(bits, bool) or int(bits) != bits or not MIN_BITS <= bits <= MAX_BITS:
        raise ParameterError(f"bits must be in [{MIN_BITS},{MAX_BITS}]")
    return int(bits)


def qrange(bits: int, signed: bool) -> tuple[int, int]:
    """Integer code range for ``bits`` bits."""
    if signed:
        return -(1 << (bits - 1)), (1 << (bits - 1)) - 1
    return 0, (1 << bits) - 1


def _f32(x: float) -> float:
    return float(np.float32(x))


@dataclass(frozen=True)
class QuantParams:
    """Everything needed to quantize or dequantize one tensor.

    ``scale`` and ``gamma`` are rounded to float32 on construction so that
    serialized parameters reproduce the in-memory ones exactly.
    ``log_exp_max`` is only meaningful for the log scheme.
    """

    scale: float
    zero_point: int
    bits: int
    signed: bool = False
    gamma: float = 1.0
    scheme: Scheme = Scheme.AFFINE
    log_exp_max: int = 0

    def __post_init__(self):
        bits = check_bits(self.bits)
        object.__setattr__(self, "scheme", Scheme(self.scheme))
        object.__setattr__(self, "scale", _f32(self.scale))
        object.__setattr__(self, "gamma", _f32(self.gamma))
        object.__setattr__(self, "zero_point", int(self.zero_point))
        object.__setattr__(self, "signed", bool(self.signed))
        if not (np.isfinite(self.scale) and self.scale > 0):
            raise ParameterError(f"scale must be positive and finite, got {self.scale}")
        if not (np.isfinite(self.gamma) and self.gamma > 0):
            raise ParameterError(f"gamma must be positive and finite, got {self.gamma}")
        if self.scheme is Scheme.AFFINE:
            lo, hi = qrange(bits, self.signed)
            if not lo <= self.zero_point <= hi:
                raise ParameterError(f"zero point {self.zero_point} outside [{lo},{hi}]")
        else:
            if self.scale != 1.0 or self.zero_point != 0:
                raise ParameterError("log scheme requires scale=1 and zero_point=0")
            if self.signed:
                raise ParameterError("log codes are stored sign-magnitude, signed must be False")

    @property
    def qmin(self) -> int:
        return qrange(self.bits, self.signed)[0]

    @property
    def qmax(self) -> int:
        return qrange(self.bits, self.signed)[1]

    def with_gamma(self, gamma: float) -> "QuantParams":
        return QuantParams(
            self.scale, self.zero_point, self.bits, self.signed, gamma, self.scheme, self.log_exp_max
        )


def pack_codes(codes, bits: int) -> bytes:
    codes = np.ascontiguousarray(codes, dtype=np.int32).ravel()
    return kernels.pack_bits(codes, check_bits(bits)).tobytes()


def unpack_codes(payload: bytes, bits: int, count: int, signed: bool) -> np.ndarray:
    bits = check_bits(bits)
    need = (count * bits + 7) // 8
    if len(payload) != need:
        raise FormatError(f"payload has {len(payload)} bytes, expected {need} for {count}x{bits} bits")
    buf = np.frombuffer(payload, dtype=np.uint8)
    return kernels.unpack_bits(np.ascontiguousarray(buf), bits, int(count), bool(signed))


@dataclass(frozen=True, eq=False)
class QuantizedTensor:
    params: QuantParams
    shape: tuple[int, ...]
    payload: bytes = field(repr=False)

    def __post_init__(self):
        object.__setattr__(self, "shape", tuple(int(d) for d in self.shape))
        need = (self.size * self.params.bits + 7) // 8
        if len(self.payload) != need:
            raise FormatError(f"payload has {len(self.payload)} bytes, expected {need}")

    @property
    def size(self) -> int:
        return int(np.prod(self.shape, dtype=np.int64))

    def codes(self) -> np.ndarray:
        return unpack_codes(self.payload, self.params.bits, self.size, self.params.signed).reshape(self.shape)

    def __eq__(self, other):
        if not isinstance(other, QuantizedTensor):
            return NotImplemented
        return self.params == other.params and self.shape == other.shape and self.payload == other.payload

    __hash__ = None


def affine_codes(x, p: QuantParams) -> tuple[np.ndarray, np.ndarray]:
    """Integer codes and the mask of elements that hit ``qmin``/``qmax``."""
    flat = as_tensor(x).ravel()
    codes, clamped = kernels.affine_codes(flat, p.scale, p.zero_point, p.qmin, p.qmax)
    return codes, clamped


def quantize_affine(x, p: QuantParams) -> QuantizedTensor:
    if p.scheme is not Scheme.AFFINE:
        raise ParameterError("quantize_affine needs affine params")
    x = as_tensor(x)
    codes, _ = affine_codes(x, p)
    return QuantizedTensor(p, x.shape, pack_codes(codes, p.bits))


def _log_exponent_window(exp_max: int, bits: int) -> tuple[int, int]:
    n_exp = (1 << (bits - 1)) - 1
    return max(exp_max - (n_exp - 1), LOG_EXP_FLOOR), exp_max


def floor_log2(x) -> np.ndarray:
    """Exact ``⌊log2|x|⌋`` for nonzero finite values."""
    _, e = np.frexp(np.abs(np.asarray(x, dtype=np.float64)))
    return e.astype(np.int64) - 1


def quantize_log(x, bits: int) -> QuantizedTensor:
    """Snap each value to ``sign(x) · 2^⌊log2|x|⌋`` inside a tensor-sized window."""
    bits = check_bits(bits)
    x = as_tensor(x)
    flat = x.ravel()
    nonzero = flat != 0
    if nonzero.any():
        exp_max = int(floor_log2(np.max(np.abs(flat))))
    else:
        exp_max = 0
    e_lo, e_hi = _log_exponent_window(exp_max, bits)
    mag = np.zeros(flat.shape, dtype=np.int64)
    if nonzero.any():
        e = np.clip(floor_log2(flat[nonzero]), e_lo, e_hi)
        mag[nonzero] = e - e_lo + 1
    sign = (flat < 0).astype(np.int64)
    codes = (sign << (bits - 1)) | mag
    p = QuantParams(1.0, 0, bits, False, 1.0, Scheme.LOG, exp_max)
    return QuantizedTensor(p, x.shape, pack_codes(codes, bits))


def dequantize(qt: QuantizedTensor) -> np.ndarray:
    p = qt.params
    codes = unpack_codes(qt.payload, p.bits, qt.size, p.signed)
    if p.scheme is Scheme.AFFINE:
        base = kernels.affine_values(codes, p.scale, p.zero_point)
    else:
        e_lo, _ = _log_exponent_window(p.log_exp_max, p.bits)
        mag = codes.astype(np.int64) & ((1 << (p.bits - 1)) - 1)
        neg = (codes.astype(np.int64) >> (p.bits - 1)) & 1
        vals = np.where(mag > 0, np.ldexp(1.0, (mag + e_lo - 1).astype(np.int32)), 0.0)
        base = np.where(neg == 1, -vals, vals).astype(np.float32)
    if p.gamma != 1.0:
        base = base * np.float32(p.gamma)
    return base.reshape(qt.shape)


def fake_quantize(x, p: QuantParams) -> tuple[np.ndarray, np.ndarray]:
    """Quantize-dequantize round trip plus the mask of unclamped elements."""
    x = as_tensor(x)
    if p.scheme is Scheme.LOG:
        return dequantize(quantize_log(x, p.bits)), np.ones(x.shape, dtype=bool)
    codes, clamped = affine_codes(x, p)
    base = kernels.affine_values(codes, p.scale, p.zero_point)
    if p.gamma != 1.0:
        base = base * np.float32(p.gamma)
    return base.reshape(x.shape), ~clamped.reshape(x.shape)


def round_half_away(v):
    v = np.asarray(v, dtype=np.float64)
    r = np.trunc(v)
    return r + np.where(np.abs(v - r) >= 0.5, np.copysign(1.0, v), 0.0)


def _widen(x_min: float, x_max: float) -> tuple[float, float]:
    if x_max <= x_min:
        c = 0.5 * (x_min + x_max)
        return c - DEGENERATE_HALF_WIDTH, c + DEGENERATE_HALF_WIDTH
    return x_min, x_max


def zero_point_for(x_min: float, scale: float, bits: int, signed: bool = False) -> int:
    z = int(round_half_away(-x_min / scale))
    lo, hi = qrange(bits, False)
    z = min(max(z, lo), hi)
    if signed:
        z -= 1 << (bits - 1)
    return z


def scale_from_range(x_min: float, x_max: float, bits: int, signed: bool = False) -> tuple[float, int]:
    """Full-range step ``(x_max − x_min)/(2^b − 1)`` and zero point ``round(−x_min/s)``.

    A degenerate range is widened to ``±1e-6`` around its midpoint. With
    ``signed`` the zero point is shifted into the signed code range.
    """
    bits = check_bits(bits)
    x_min, x_max = _widen(float(x_min), float(x_max))
    levels = (1 << bits) - 1
    scale = (x_max - x_min) / levels
    # -x_min/s written as -x_min*levels/range keeps exact halves exact.
    z = int(round_half_away(-x_min * levels / (x_max - x_min)))
    z = min(max(z, 0), levels)
    if signed:
        z -= 1 << (bits - 1)
    return scale, z


def scale_theorem1(w, bits: int) -> float:
    """Closed-form scale ``2(max − min)/(2^b − 1)`` (twice the full-range step)."""
    bits = check_bits(bits)
    w = np.asarray(w, dtype=np.float64)
    if w.size == 0:
        raise DegenerateRangeError("empty tensor has no range")
    lo, hi = float(w.min()), float(w.max())
    if hi <= lo:
        raise DegenerateRangeError("constant tensor has no range")
    return 2.0 * (hi - lo) / ((1 << bits) - 1)


def affine_mse(w, scale: float, bits: int, signed: bool = False) -> float:
    """Empirical MSE of the quantize-dequantize round trip at ``scale``.

    The zero point follows ``round(−x_min/s)`` clamped to the code range.
    """
    w = as_tensor(w)
    x_min = float(np.min(w))
    z = zero_point_for(x_min, scale, bits, signed)
    p = QuantParams(scale, z, bits, signed)
    xhat, _ = fake_quantize(w, p)
    d = w.astype(np.float64) - xhat.astype(np.float64)
    return float(np.mean(d * d))


def scale_mse_oracle(w, bits: int, grid_points: int = 200, signed: bool = False) -> float:
    """Brute-force MSE-optimal scale over a log grid around the full-range step.

    The grid spans ``[Δ/4, 4Δ]`` with ``Δ = range/(2^b − 1)`` and also contains
    ``Δ`` and ``2Δ`` themselves, so the result is never worse than either
    closed-form rule.
    """
    bits = check_bits(bits)
    if grid_points < 100:
        raise ParameterError("grid_points must be >= 100")
    w = as_tensor(w)
    if w.size == 0:
        raise DegenerateRangeError("empty tensor has no range")
    lo, hi = float(np.min(w)), float(np.max(w))
    if hi <= lo:
        raise DegenerateRangeError("constant tensor has no range")
    step = (hi - lo) / ((1 << bits) - 1)
    grid = np.geomspace(step / 4.0, 4.0 * step, grid_points)
    candidates = np.concatenate([grid, [step, 2.0 * step]])
    best_s, best_mse = None, np.inf
    for s in candidates:
        s32 = _f32(s)
        mse = affine_mse(w, s32, bits, signed)
        if mse < best_mse:
            best_s, best_mse = s32, mse
    return best_s


@dataclass(frozen=True)
class QuantError:
    max_abs: float
    mse: float
    relative_eq: float
    norm: str  # "spectral" for matrices, "frobenius" otherwise


def relative_error(x, xhat) -> tuple[float, str]:
    """``‖x − x̂‖ / ‖x‖`` with the spectral norm for matrices; 0 when ``x`` is zero."""
    x = np.asarray(x, dtype=np.float64)
    d = x - np.asarray(xhat, dtype=np.float64)
    if x.ndim == 2 and x.size:
        denom = spectral_norm(x)
        return (spectral_norm(d) / denom if denom > 0 else 0.0), "spectral"
    denom = frobenius_norm(x)
    return (frobenius_norm(d) / denom if denom > 0 else 0.0), "frobenius"


def measure_error(x, qt: QuantizedTensor) -> QuantError:
    x = as_tensor(x)
    if tuple(x.shape) != qt.shape:
        raise DimensionError(f"shape {x.shape} does not match quantized shape {qt.shape}")
    return error_between(x, dequantize(qt))


def error_between(x, xhat) -> QuantError:
    d = np.asarray(x, dtype=np.float64) - np.asarray(xhat, dtype=np.float64)
    if d.size == 0:
        return QuantError(0.0, 0.0, 0.0, "frobenius")
    rel, norm = relative_error(x, xhat)
    return QuantError(float(np.max(np.abs(d))), float(np.mean(d * d)), float(rel), norm)
