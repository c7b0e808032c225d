# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled hot loops: fixed-order matmul, affine code rounding, bit packing.

Every routine here has a line-for-line twin in ``_kernels_py`` and the two
must agree bit for bit.
"""

import numpy as np
cimport numpy as cnp
from libc.math cimport fabs, trunc, copysign

cnp.import_array()


def matmul(const float[:, ::1] a, const float[:, ::1] b):
    cdef Py_ssize_t m = a.shape[0]
    cdef Py_ssize_t kdim = a.shape[1]
    cdef Py_ssize_t n = b.shape[1]
    cdef Py_ssize_t i, k, j
    cdef float aik
    out = np.zeros((m, n), dtype=np.float32)
    cdef float[:, ::1] c = out
    # c[i, j] accumulates over k in ascending order; the j loop only
    # vectorizes across independent outputs.
    for i in range(m):
        for k in range(kdim):
            aik = a[i, k]
            for j in range(n):
                c[i, j] = c[i, j] + aik * b[k, j]
    return out


def affine_codes(const float[::1] x, double scale, long zero_point, long qmin, long qmax):
    """Return (codes, clamped) for round-half-away-from-zero affine quantization."""
    cdef Py_ssize_t n = x.shape[0]
    cdef Py_ssize_t i
    cdef double v, r, q
    codes = np.empty(n, dtype=np.int32)
    clamped = np.zeros(n, dtype=np.bool_)
    cdef int[::1] c = codes
    cdef cnp.npy_bool[::1] m = clamped
    cdef double lo = <double>qmin
    cdef double hi = <double>qmax
    for i in range(n):
        v = <double>x[i] / scale
        r = trunc(v)
        if fabs(v - r) >= 0.5:
            r = r + copysign(1.0, v)
        q = r + <double>zero_point
        if q < lo:
            q = lo
            m[i] = 1
        elif q > hi:
            q = hi
            m[i] = 1
        c[i] = <int>q
    return codes, clamped


def affine_values(const int[::1] codes, double scale, long zero_point):
    cdef Py_ssize_t n = codes.shape[0]
    cdef Py_ssize_t i
    out = np.empty(n, dtype=np.float32)
    cdef float[::1] o = out
    for i in range(n):
        o[i] = <float>(scale * <double>(codes[i] - zero_point))
    return out


def pack_bits(const int[::1] codes, int bits):
    """Pack the low ``bits`` bits of each code, LSB-first, little-endian."""
    cdef Py_ssize_t n = codes.shape[0]
    cdef Py_ssize_t nbytes = (n * bits + 7) // 8
    cdef Py_ssize_t i, j = 0
    cdef unsigned long long acc = 0
    cdef int filled = 0
    cdef unsigned int mask = (1u << bits) - 1u
    out = np.zeros(nbytes, dtype=np.uint8)
    cdef unsigned char[::1] o = out
    for i in range(n):
        acc |= (<unsigned long long>((<unsigned int>codes[i]) & mask)) << filled
        filled += bits
        while filled >= 8:
            o[j] = <unsigned char>(acc & 0xFF)
            acc >>= 8
            filled -= 8
            j += 1
    if filled > 0:
        o[j] = <unsigned char>(acc & 0xFF)
    return out


def unpack_bits(const unsigned char[::1] payload, int bits, Py_ssize_t count, bint signed):
    cdef Py_ssize_t i, j = 0
    cdef unsigned long long acc = 0
    cdef int filled = 0
    cdef unsigned int mask = (1u << bits) - 1u
    cdef unsigned int half = 1u << (bits - 1)
    cdef unsigned int u
    out = np.empty(count, dtype=np.int32)
    cdef int[::1] o = out
    for i in range(count):
        while filled < bits:
            acc |= (<unsigned long long>payload[j]) << filled
            filled += 8
            j += 1
        u = <unsigned int>(acc & mask)
        acc >>= bits
        filled -= bits
        if signed and u >= half:
            o[i] = <int>u - <int>(mask + 1u)
        else:
            o[i] = <int>u
    return out
