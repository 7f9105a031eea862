# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled inner loops: the first-order affine recurrence and xoshiro256++.

Every routine here has a pure-Python twin in :mod:`superscan.kernels` that
produces bit-identical results (the extension is built with
``-ffp-contract=off`` so no fused multiply-adds sneak in).
"""
from libc.stdint cimport uint64_t

ctypedef fused real:
    float
    double


def affine_scan_forward(real[:, ::1] a, real[:, ::1] b, real[:, ::1] h):
    """h[t] = a[t] * h[t-1] + b[t] with h[-1] = 0, rows are time steps."""
    cdef Py_ssize_t L = a.shape[0]
    cdef Py_ssize_t K = a.shape[1]
    cdef Py_ssize_t t, k
    if L == 0:
        return
    with nogil:
        for k in range(K):
            h[0, k] = b[0, k]
        for t in range(1, L):
            for k in range(K):
                h[t, k] = a[t, k] * h[t - 1, k] + b[t, k]


def affine_scan_backward(real[:, ::1] a, real[:, ::1] h, real[:, ::1] gh,
                         real[:, ::1] ga, real[:, ::1] gb):
    """Adjoint of :func:`affine_scan_forward`.

    gb holds the total derivative with respect to each state, ga the
    derivative with respect to each decay factor.
    """
    cdef Py_ssize_t L = a.shape[0]
    cdef Py_ssize_t K = a.shape[1]
    cdef Py_ssize_t t, k
    if L == 0:
        return
    with nogil:
        for k in range(K):
            gb[L - 1, k] = gh[L - 1, k]
        for t in range(L - 2, -1, -1):
            for k in range(K):
                gb[t, k] = a[t + 1, k] * gb[t + 1, k] + gh[t, k]
        for k in range(K):
            ga[0, k] = 0
        for t in range(1, L):
            for k in range(K):
                ga[t, k] = gb[t, k] * h[t - 1, k]


cdef inline uint64_t rotl(uint64_t x, int k) nogil:
    return (x << k) | (x >> (64 - k))


def xoshiro_fill(uint64_t[::1] state, uint64_t[::1] out):
    """Fill ``out`` with xoshiro256++ outputs, advancing ``state`` in place."""
    cdef uint64_t s0 = state[0], s1 = state[1], s2 = state[2], s3 = state[3]
    cdef uint64_t result, t
    cdef Py_ssize_t i, n = out.shape[0]
    with nogil:
        for i in range(n):
            result = rotl(s0 + s3, 23) + s0
            t = s1 << 17
            s2 ^= s0
            s3 ^= s1
            s1 ^= s2
            s0 ^= s3
            s2 ^= t
            s3 = rotl(s3, 45)
            out[i] = result
    state[0] = s0
    state[1] = s1
    state[2] = s2
    state[3] = s3
