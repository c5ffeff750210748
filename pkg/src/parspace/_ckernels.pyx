# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled hot kernels: Jacobi row sweeps and patch (un)folding.

Same signatures and rotation schedule as ``_pykernels``.
"""

import numpy as np
cimport numpy as cnp
from libc.math cimport sqrt, fabs

from ._pykernels import round_robin_pairs

cnp.import_array()


cdef inline double _dot(double[:, ::1] B, Py_ssize_t i, Py_ssize_t j, Py_ssize_t k) nogil:
    cdef Py_ssize_t t
    cdef double acc = 0.0
    for t in range(k):
        acc += B[i, t] * B[j, t]
    return acc


def jacobi_rows(double[:, ::1] B, double[:, ::1] Q, double tol, double floor_sq, int max_sweeps):
    cdef Py_ssize_t d = B.shape[0]
    cdef Py_ssize_t k = B.shape[1]
    cdef Py_ssize_t nq = Q.shape[0]
    flat = [pair for rnd in round_robin_pairs(d) for pair in rnd]
    cdef Py_ssize_t npairs = len(flat)
    cdef cnp.intp_t[::1] pi = np.array([pair[0] for pair in flat] or [0], dtype=np.intp)
    cdef cnp.intp_t[::1] pj = np.array([pair[1] for pair in flat] or [0], dtype=np.intp)
    cdef Py_ssize_t p, i, j, t
    cdef double alpha, beta, gamma, resid, zeta, tt, c, s, x, y
    cdef double off = 0.0
    cdef int sweeps = 0
    with nogil:
        while sweeps < max_sweeps:
            sweeps += 1
            off = 0.0
            for p in range(npairs):
                i = pi[p]
                j = pj[p]
                alpha = _dot(B, i, i, k)
                beta = _dot(B, j, j, k)
                if alpha <= floor_sq or beta <= floor_sq:
                    continue
                gamma = _dot(B, i, j, k)
                resid = fabs(gamma) / sqrt(alpha * beta)
                if resid > off:
                    off = resid
                if resid <= tol:
                    continue
                zeta = (beta - alpha) / (2.0 * gamma)
                if zeta >= 0:
                    tt = 1.0 / (zeta + sqrt(1.0 + zeta * zeta))
                else:
                    tt = -1.0 / (-zeta + sqrt(1.0 + zeta * zeta))
                c = 1.0 / sqrt(1.0 + tt * tt)
                s = c * tt
                for t in range(k):
                    x = B[i, t]
                    y = B[j, t]
                    B[i, t] = c * x - s * y
                    B[j, t] = s * x + c * y
                for t in range(nq):
                    x = Q[t, i]
                    y = Q[t, j]
                    Q[t, i] = c * x - s * y
                    Q[t, j] = s * x + c * y
            if off <= tol:
                break
    return sweeps, off


def im2col(double[:, :, :, ::1] xp, int kh, int kw, int stride):
    cdef Py_ssize_t n = xp.shape[0], c = xp.shape[1], hp = xp.shape[2], wp = xp.shape[3]
    cdef Py_ssize_t ho = (hp - kh) // stride + 1
    cdef Py_ssize_t wo = (wp - kw) // stride + 1
    out = np.empty((n, ho * wo, c * kh * kw))
    cdef double[:, :, ::1] o = out
    cdef Py_ssize_t b, ch, a, bb, i, j, row, col
    with nogil:
        for b in range(n):
            for a in range(ho):
                for bb in range(wo):
                    row = a * wo + bb
                    col = 0
                    for ch in range(c):
                        for i in range(kh):
                            for j in range(kw):
                                o[b, row, col] = xp[b, ch, a * stride + i, bb * stride + j]
                                col += 1
    return out


def col2im(cols, shape, int kh, int kw, int stride, int ho, int wo):
    cdef double[:, :, ::1] cv = np.ascontiguousarray(cols, dtype=np.float64).reshape(
        shape[0], ho * wo, shape[1] * kh * kw)
    out = np.zeros(shape)
    cdef double[:, :, :, ::1] o = out
    cdef Py_ssize_t n = shape[0], c = shape[1]
    cdef Py_ssize_t b, ch, a, bb, i, j, row, col
    with nogil:
        for b in range(n):
            for a in range(ho):
                for bb in range(wo):
                    row = a * wo + bb
                    col = 0
                    for ch in range(c):
                        for i in range(kh):
                            for j in range(kw):
                                o[b, ch, a * stride + i, bb * stride + j] += cv[b, row, col]
                                col += 1
    return out
