"""Pure numpy fallback for the compiled kernels in ``_kernels.pyx``.

Results are bit-identical to the compiled versions; only speed differs.
"""

import numpy as np


def matmul(a, b):
    a = np.ascontiguousarray(a, dtype=np.float32)
    b = np.ascontiguousarray(b, dtype=np.float32)
    m, kdim = a.shape
    out = np.zeros((m, b.shape[1]), dtype=np.float32)
    tmp = np.empty_like(out)
    # One rank-1 update per k keeps the per-element summation order of the
    # naive triple loop.
    for k in range(kdim):
        np.multiply(a[:, k, None], b[k], out=tmp)
        out += tmp
    return out


def affine_codes(x, scale, zero_point, qmin, qmax):
    v = np.asarray(x, dtype=np.float32).astype(np.float64) / float(scale)
    r = np.trunc(v)
    r += np.where(np.abs(v - r) >= 0.5, np.copysign(1.0, v), 0.0)
    q = r + float(zero_point)
    clamped = (q < qmin) | (q > qmax)
    q = np.clip(q, qmin, qmax)
    return q.astype(np.int32), clamped


def affine_values(codes, scale, zero_point):
    diff = np.asarray(codes, dtype=np.int64) - int(zero_point)
    return (float(scale) * diff.astype(np.float64)).astype(np.float32)


def pack_bits(codes, bits):
    u = np.asarray(codes, dtype=np.int64) & ((1 << bits) - 1)
    planes = ((u[:, None] >> np.arange(bits)) & 1).astype(np.uint8)
    return np.packbits(planes.reshape(-1), bitorder="little")


def unpack_bits(payload, bits, count, signed):
    stream = np.unpackbits(np.asarray(payload, dtype=np.uint8), bitorder="little")
    planes = stream[: count * bits].reshape(count, bits).astype(np.int64)
    u = (planes << np.arange(bits)).sum(axis=1)
    if signed:
        u = np.where(u >= (1 << (bits - 1)), u - (1 << bits), u)
    return u.astype(np.int32)
