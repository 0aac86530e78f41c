# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled kernels for normal-equation accumulation and Schur elimination.

Signatures mirror ``_pykernels``.
"""
import numpy as np
cimport numpy as cnp
from libc.math cimport fabs

cnp.import_array()

cdef double SINGULAR_RTOL = 1e-13


def accumulate(double[:, ::1] H, double[::1] b_co, double[:, :, ::1] H_pp, double[:, ::1] b_p,
               double[:, :, ::1] pair_blocks, double[:, ::1] r, double[:, :, ::1] W,
               double[:, :, :, ::1] Jco, long[:, ::1] co_idx, Jp_obj, long[::1] p_idx,
               long[:, ::1] pair_idx):
    cdef Py_ssize_t n = co_idx.shape[0]
    cdef Py_ssize_t s = co_idx.shape[1]
    cdef Py_ssize_t m = r.shape[1]
    cdef Py_ssize_t f, a, c, i, j, k, l
    cdef long ia, ic, ip, pr
    cdef double acc
    cdef double[:, :, ::1] Jp
    cdef bint has_p = Jp_obj is not None and Jp_obj.size > 0
    if has_p:
        Jp = Jp_obj
    # WJ[s][m][6] and WJp[m][3] scratch
    cdef double[:, :, ::1] WJ = np.empty((s, m, 6))
    cdef double[:, ::1] WJp = np.empty((m, 3))
    cdef double[::1] Wr = np.empty(m)

    for f in range(n):
        for i in range(m):
            acc = 0.0
            for j in range(m):
                acc += W[f, i, j] * r[f, j]
            Wr[i] = acc
        for a in range(s):
            if co_idx[f, a] < 0:
                continue
            for i in range(m):
                for k in range(6):
                    acc = 0.0
                    for j in range(m):
                        acc += W[f, i, j] * Jco[f, a, j, k]
                    WJ[a, i, k] = acc
        for a in range(s):
            ia = co_idx[f, a]
            if ia < 0:
                continue
            for k in range(6):
                acc = 0.0
                for i in range(m):
                    acc += Jco[f, a, i, k] * Wr[i]
                b_co[6 * ia + k] += acc
            for c in range(s):
                ic = co_idx[f, c]
                if ic < 0:
                    continue
                for k in range(6):
                    for l in range(6):
                        acc = 0.0
                        for i in range(m):
                            acc += Jco[f, a, i, k] * WJ[c, i, l]
                        H[6 * ia + k, 6 * ic + l] += acc
        if not has_p:
            continue
        ip = p_idx[f]
        if ip < 0:
            continue
        for i in range(m):
            for k in range(3):
                acc = 0.0
                for j in range(m):
                    acc += W[f, i, j] * Jp[f, j, k]
                WJp[i, k] = acc
        for k in range(3):
            acc = 0.0
            for i in range(m):
                acc += Jp[f, i, k] * Wr[i]
            b_p[ip, k] += acc
            for l in range(3):
                acc = 0.0
                for i in range(m):
                    acc += Jp[f, i, k] * WJp[i, l]
                H_pp[ip, k, l] += acc
        for a in range(s):
            pr = pair_idx[f, a]
            if pr < 0:
                continue
            for k in range(6):
                for l in range(3):
                    acc = 0.0
                    for i in range(m):
                        acc += Jco[f, a, i, k] * WJp[i, l]
                    pair_blocks[pr, k, l] += acc


cdef inline bint _inv3(double[:, ::1] A, double* out) nogil:
    cdef double c00 = A[1, 1] * A[2, 2] - A[1, 2] * A[2, 1]
    cdef double c01 = A[1, 2] * A[2, 0] - A[1, 0] * A[2, 2]
    cdef double c02 = A[1, 0] * A[2, 1] - A[1, 1] * A[2, 0]
    cdef double det = A[0, 0] * c00 + A[0, 1] * c01 + A[0, 2] * c02
    cdef double scale = 0.0
    cdef int i, j
    for i in range(3):
        for j in range(3):
            if fabs(A[i, j]) > scale:
                scale = fabs(A[i, j])
    if not (fabs(det) > SINGULAR_RTOL * scale * scale * scale):
        return False
    cdef double idet = 1.0 / det
    out[0] = c00 * idet
    out[1] = (A[0, 2] * A[2, 1] - A[0, 1] * A[2, 2]) * idet
    out[2] = (A[0, 1] * A[1, 2] - A[0, 2] * A[1, 1]) * idet
    out[3] = c01 * idet
    out[4] = (A[0, 0] * A[2, 2] - A[0, 2] * A[2, 0]) * idet
    out[5] = (A[0, 2] * A[1, 0] - A[0, 0] * A[1, 2]) * idet
    out[6] = c02 * idet
    out[7] = (A[0, 1] * A[2, 0] - A[0, 0] * A[2, 1]) * idet
    out[8] = (A[0, 0] * A[1, 1] - A[0, 1] * A[1, 0]) * idet
    return True


def invert_point_blocks(H_pp_obj):
    cdef double[:, :, ::1] H_pp = np.ascontiguousarray(H_pp_obj, dtype=np.float64)
    cdef Py_ssize_t n = H_pp.shape[0]
    out = np.empty((n, 3, 3))
    cdef double[:, :, ::1] V = out
    cdef Py_ssize_t p
    for p in range(n):
        if not _inv3(H_pp[p], &V[p, 0, 0]):
            return None, int(p)
    return out, -1


def schur_reduce(H_obj, b_co_obj, H_pp_obj, b_p_obj, long[::1] pair_ptr, long[::1] pair_co,
                 double[:, :, ::1] pair_blocks):
    Vinv_obj, bad = invert_point_blocks(H_pp_obj)
    if bad >= 0:
        return None, None, None, bad
    H_red_obj = np.array(H_obj, dtype=np.float64, order="C", copy=True)
    b_red_obj = np.array(b_co_obj, dtype=np.float64, copy=True)
    cdef double[:, ::1] Hr = H_red_obj
    cdef double[::1] br = b_red_obj
    cdef double[:, :, ::1] Vinv = Vinv_obj
    cdef double[:, ::1] b_p = np.ascontiguousarray(b_p_obj, dtype=np.float64)
    cdef Py_ssize_t n_p = Vinv.shape[0]
    cdef Py_ssize_t p, a, c, k, l, j, lo, hi
    cdef long ca, cc
    cdef double acc
    WV_obj = np.empty((max(pair_blocks.shape[0], 1), 6, 3))
    cdef double[:, :, ::1] WV = WV_obj
    with nogil:
        for p in range(n_p):
            lo = pair_ptr[p]
            hi = pair_ptr[p + 1]
            for a in range(lo, hi):
                for k in range(6):
                    for l in range(3):
                        acc = 0.0
                        for j in range(3):
                            acc += pair_blocks[a, k, j] * Vinv[p, j, l]
                        WV[a, k, l] = acc
            for a in range(lo, hi):
                ca = pair_co[a]
                for k in range(6):
                    acc = 0.0
                    for j in range(3):
                        acc += WV[a, k, j] * b_p[p, j]
                    br[6 * ca + k] -= acc
                for c in range(lo, hi):
                    cc = pair_co[c]
                    for k in range(6):
                        for l in range(6):
                            acc = 0.0
                            for j in range(3):
                                acc += WV[a, k, j] * pair_blocks[c, l, j]
                            Hr[6 * ca + k, 6 * cc + l] -= acc
    return H_red_obj, b_red_obj, Vinv_obj, -1


def back_substitute(double[:, :, ::1] Vinv, b_p_obj, long[::1] pair_ptr, long[::1] pair_co,
                    double[:, :, ::1] pair_blocks, double[::1] x_co):
    cdef double[:, ::1] b_p = np.ascontiguousarray(b_p_obj, dtype=np.float64)
    cdef Py_ssize_t n_p = b_p.shape[0]
    out = np.empty((n_p, 3))
    cdef double[:, ::1] x_p = out
    cdef double rhs[3]
    cdef Py_ssize_t p, a, k, j
    cdef long ca
    cdef double acc
    with nogil:
        for p in range(n_p):
            for j in range(3):
                rhs[j] = b_p[p, j]
            for a in range(pair_ptr[p], pair_ptr[p + 1]):
                ca = pair_co[a]
                for j in range(3):
                    acc = 0.0
                    for k in range(6):
                        acc += pair_blocks[a, k, j] * x_co[6 * ca + k]
                    rhs[j] -= acc
            for j in range(3):
                acc = 0.0
                for k in range(3):
                    acc += Vinv[p, j, k] * rhs[k]
                x_p[p, j] = acc
    return out
