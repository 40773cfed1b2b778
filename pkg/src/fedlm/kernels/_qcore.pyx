# cython: boundscheck=False, wraparound=False, cdivision=True, language_level=3
"""Compiled quantization kernels.

Bit-identical to _qcore_py.py by construction: same operation order, no
fused multiply-adds (built with -ffp-contract=off).  The per-element loops
here are the simulator's hot path outside BLAS.
"""

from libc.math cimport fabs, floor


def stoch_quantize(const double[::1] v, double lo, double step, long k, const double[::1] u, unsigned int[::1] out):
    cdef Py_ssize_t i, n = v.shape[0]
    cdef double x, f
    cdef long idx, top = k - 1
    if step == 0.0:
        for i in range(n):
            out[i] = 0
        return
    for i in range(n):
        x = (v[i] - lo) / step
        f = floor(x)
        idx = <long> f
        if u[i] < (x - f):
            idx += 1
        if idx < 0:
            idx = 0
        elif idx > top:
            idx = top
        out[i] = <unsigned int> idx


def dequantize_levels(const unsigned int[::1] idx, double lo, double step, double offset, double[::1] out):
    cdef Py_ssize_t i, n = idx.shape[0]
    for i in range(n):
        out[i] = (lo + (<double> idx[i]) * step) + offset


def ternary_quantize(const double[::1] v, double s, const double[::1] u, signed char[::1] out):
    cdef Py_ssize_t i, n = v.shape[0]
    cdef signed char sign
    if s == 0.0:
        for i in range(n):
            out[i] = 0
        return
    for i in range(n):
        sign = (v[i] > 0.0) - (v[i] < 0.0)
        out[i] = sign if u[i] < (fabs(v[i]) / s) else 0


def pack_bits(const unsigned int[::1] idx, int bits, unsigned char[::1] out):
    cdef Py_ssize_t i, n = idx.shape[0]
    cdef Py_ssize_t pos = 0
    cdef unsigned long long acc = 0
    cdef int nacc = 0
    for i in range(n):
        acc |= (<unsigned long long> idx[i]) << nacc
        nacc += bits
        while nacc >= 8:
            out[pos] = <unsigned char> (acc & 0xFF)
            pos += 1
            acc >>= 8
            nacc -= 8
    if nacc > 0:
        out[pos] = <unsigned char> (acc & 0xFF)


def unpack_bits(const unsigned char[::1] buf, long n, int bits, unsigned int[::1] out):
    cdef Py_ssize_t i
    cdef Py_ssize_t pos = 0
    cdef unsigned long long acc = 0
    cdef int nacc = 0
    cdef unsigned long long mask = (<unsigned long long> 1 << bits) - 1
    for i in range(n):
        while nacc < bits:
            acc |= (<unsigned long long> buf[pos]) << nacc
            pos += 1
            nacc += 8
        out[i] = <unsigned int> (acc & mask)
        acc >>= bits
        nacc -= bits
