# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled kernels; see ``_pykernels.py`` for the reference semantics."""

import numpy as np

from libc.math cimport cos, floor, log, sin, sqrt, M_PI
from libc.stdint cimport uint64_t

cdef double BICUBIC_A = -0.75
cdef double INV_2_53 = 1.0 / 9007199254740992.0


cdef inline uint64_t _rotl(uint64_t x, int k) nogil:
    return (x << k) | (x >> (64 - k))


cdef inline uint64_t _next(uint64_t* s) nogil:
    cdef uint64_t result = _rotl(s[1] * 5, 7) * 9
    cdef uint64_t t = s[1] << 17
    s[2] ^= s[0]
    s[3] ^= s[1]
    s[1] ^= s[2]
    s[0] ^= s[3]
    s[2] ^= t
    s[3] = _rotl(s[3], 45)
    return result


def xoshiro_next_u64(uint64_t[::1] state):
    cdef uint64_t s[4]
    cdef int k
    for k in range(4):
        s[k] = state[k]
    cdef uint64_t r = _next(s)
    for k in range(4):
        state[k] = s[k]
    return int(r)


def xoshiro_uniform_fill(uint64_t[::1] state, double[::1] out):
    cdef uint64_t s[4]
    cdef Py_ssize_t i
    cdef int k
    for k in range(4):
        s[k] = state[k]
    with nogil:
        for i in range(out.shape[0]):
            out[i] = <double>(_next(s) >> 11) * INV_2_53
    for k in range(4):
        state[k] = s[k]


def xoshiro_normal_fill(uint64_t[::1] state, double[::1] out):
    cdef uint64_t s[4]
    cdef Py_ssize_t i = 0, n = out.shape[0]
    cdef double u1, u2, r
    cdef double two_pi = 2.0 * M_PI
    cdef int k
    for k in range(4):
        s[k] = state[k]
    with nogil:
        while i < n:
            u1 = 1.0 - <double>(_next(s) >> 11) * INV_2_53
            u2 = <double>(_next(s) >> 11) * INV_2_53
            r = sqrt(-2.0 * log(u1))
            out[i] = r * cos(two_pi * u2)
            if i + 1 < n:
                out[i + 1] = r * sin(two_pi * u2)
            i += 2
    for k in range(4):
        state[k] = s[k]


cdef inline double _cubic(double x) nogil:
    cdef double a = BICUBIC_A
    if x < 0:
        x = -x
    if x <= 1.0:
        return ((a + 2.0) * x - (a + 3.0)) * x * x + 1.0
    if x < 2.0:
        return ((a * x - 5.0 * a) * x + 8.0 * a) * x - 4.0 * a
    return 0.0


cdef inline Py_ssize_t _clamp(Py_ssize_t i, Py_ssize_t n) nogil:
    if i < 0:
        return 0
    if i >= n:
        return n - 1
    return i


def bicubic_upsample(img, int factor):
    cdef double[:, ::1] src = np.ascontiguousarray(img, dtype=np.float64)
    cdef Py_ssize_t h = src.shape[0], w = src.shape[1]
    cdef Py_ssize_t oh = h * factor, ow = w * factor
    tmp_arr = np.zeros((oh, w))
    out_arr = np.zeros((oh, ow))
    cdef double[:, ::1] tmp = tmp_arr
    cdef double[:, ::1] out = out_arr
    cdef Py_ssize_t o, c, k, i0
    cdef double pos, t, wgt
    with nogil:
        # rows
        for o in range(oh):
            pos = (o + 0.5) / factor - 0.5
            i0 = <Py_ssize_t>floor(pos)
            t = pos - i0
            for k in range(-1, 3):
                wgt = _cubic(t - k)
                for c in range(w):
                    tmp[o, c] += wgt * src[_clamp(i0 + k, h), c]
        # columns
        for o in range(ow):
            pos = (o + 0.5) / factor - 0.5
            i0 = <Py_ssize_t>floor(pos)
            t = pos - i0
            for k in range(-1, 3):
                wgt = _cubic(t - k)
                for c in range(oh):
                    out[c, o] += wgt * tmp[c, _clamp(i0 + k, w)]
    return out_arr


def ordering_aucs(table, int n):
    cdef double[::1] tab = np.ascontiguousarray(table, dtype=np.float64)
    cdef Py_ssize_t count = 1, p
    cdef int i, j, s, tmpi
    for i in range(2, n + 1):
        count *= i
    out_arr = np.empty(count)
    cdef double[::1] out = out_arr
    cdef int perm[16]
    cdef long full = (1 << n) - 1, mask
    cdef double total
    for i in range(n):
        perm[i] = i
    with nogil:
        for p in range(count):
            mask = full
            total = tab[mask]
            for s in range(n):
                mask &= ~(1 << perm[s])
                total += tab[mask]
            out[p] = total / (n + 1)
            i = n - 2
            while i >= 0 and perm[i] > perm[i + 1]:
                i -= 1
            if i < 0:
                break
            j = n - 1
            while perm[j] < perm[i]:
                j -= 1
            tmpi = perm[i]; perm[i] = perm[j]; perm[j] = tmpi
            i += 1
            j = n - 1
            while i < j:
                tmpi = perm[i]; perm[i] = perm[j]; perm[j] = tmpi
                i += 1
                j -= 1
    return out_arr
