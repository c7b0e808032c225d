"""Dense float32 tensor helpers, seeded RNG and matrix norms.

Tensors are plain C-contiguous ``numpy.float32`` arrays. Randomness comes
from numpy's PCG64 bit generator, whose output stream is fixed by its
published reference implementation and identical on every platform.
"""

from __future__ import annotations

import logging

import numpy as np

from quantlab._backend import kernels
from quantlab.errors import DimensionError, DomainError

logger = logging.getLogger(__name__)

DEFAULT_POWER_ITERS = 200
DEFAULT_POWER_TOL = 1e-8


def make_rng(seed: int) -> np.random.Generator:
    """Seeded generator; identical seeds give identical streams everywhere."""
    return np.random.Generator(np.random.PCG64(int(seed) & 0xFFFFFFFFFFFFFFFF))


def as_tensor(x) -> np.ndarray:
    return np.ascontiguousarray(x, dtype=np.float32)


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Row-major float32 matrix product with a fixed summation order."""
    a = as_tensor(a)
    b = as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"cannot multiply shapes {a.shape} and {b.shape}")
    return kernels.matmul(a, b)


def relu(t: np.ndarray) -> np.ndarray:
    return np.maximum(as_tensor(t), np.float32(0.0))


def add_bias(t: np.ndarray, b: np.ndarray) -> np.ndarray:
    t = as_tensor(t)
    b = as_tensor(b)
    if b.ndim != 1 or t.shape[-1] != b.shape[0]:
        raise DimensionError(f"bias of shape {b.shape} does not match {t.shape}")
    return t + b


def _nonempty(t) -> np.ndarray:
    t = np.asarray(t, dtype=np.float64).ravel()
    if t.size == 0:
        raise DomainError("statistic of an empty tensor is undefined")
    return t


def variance(t) -> float:
    """Population variance, accumulated in float64."""
    v = _nonempty(t)
    return float(np.mean((v - v.mean()) ** 2))


def second_moment(t) -> float:
    v = _nonempty(t)
    return float(np.mean(v * v))


def frobenius_norm(t) -> float:
    v = np.asarray(t, dtype=np.float64).ravel()
    return float(np.sqrt(np.dot(v, v)))


def power_iteration(
    w,
    max_iters: int = DEFAULT_POWER_ITERS,
    tol: float = DEFAULT_POWER_TOL,
    seed: int = 0,
) -> tuple[float, bool]:
    """Largest singular value of ``w`` and whether the iteration converged.

    Iterates on ``WᵀW`` in float64 from a seeded start vector. The estimate
    ``‖Wv‖`` for unit ``v`` never exceeds the true value.
    """
    w = np.asarray(w, dtype=np.float64)
    if w.ndim != 2 or w.size == 0:
        raise DimensionError(f"spectral norm needs a nonempty matrix, got shape {w.shape}")
    if max_iters < 1:
        raise DomainError("max_iters must be >= 1")
    v = make_rng(seed).standard_normal(w.shape[1])
    v /= np.linalg.norm(v)
    best = 0.0
    prev = 0.0
    for _ in range(max_iters):
        wv = w @ v
        est = float(np.linalg.norm(wv))
        best = max(best, est)
        if est == 0.0:
            return 0.0, True
        u = w.T @ wv
        nu = np.linalg.norm(u)
        if nu == 0.0:
            return best, True
        v = u / nu
        if prev > 0.0 and abs(est - prev) < tol * est:
            return best, True
        prev = est
    return best, False


def spectral_norm(w, max_iters: int = DEFAULT_POWER_ITERS, tol: float = DEFAULT_POWER_TOL) -> float:
    value, converged = power_iteration(w, max_iters, tol)
    if not converged:
        logger.debug("power iteration stopped after %d iterations without converging", max_iters)
    return value
