# cython: boundscheck=False, wraparound=False, cdivision=True
"""Compiled evaluation kernels: fused row forward pass and key dedup.

Mirrors the pure-numpy implementations in `_forward_py`; the backends agree
to floating-point rounding (summation order matches, tanh may differ by ulps
between libm and numpy's vectorized implementation).
"""

import numpy as np

cimport numpy as cnp
from libc.math cimport tanh

cnp.import_array()


def rows_forward(
    double[:, :, ::1] proj,
    double[:, ::1] clspos,
    double[:, ::1] W2,
    double[::1] b2,
    long[:, ::1] win,
    long[::1] cp_idx,
):
    """Hidden-layer forward for (window, class, position) rows; see `_forward_py`."""
    cdef Py_ssize_t U = win.shape[0]
    cdef Py_ssize_t S = win.shape[1]
    cdef Py_ssize_t H = clspos.shape[1]
    cdef Py_ssize_t K = W2.shape[1]
    out_arr = np.empty((U, K), dtype=np.float64)
    cdef double[:, ::1] out = out_arr
    cdef double[::1] acc = np.empty(H, dtype=np.float64)
    cdef Py_ssize_t u, o, h, k
    cdef long v, cp
    cdef double s
    with nogil:
        for u in range(U):
            cp = cp_idx[u]
            for h in range(H):
                acc[h] = clspos[cp, h]
            for o in range(S):
                v = win[u, o]
                for h in range(H):
                    acc[h] += proj[o, v, h]
            for h in range(H):
                acc[h] = tanh(acc[h])
            for k in range(K):
                s = b2[k]
                for h in range(H):
                    s += acc[h] * W2[h, k]
                out[u, k] = s
    return out_arr


def dedup_rows(long[::1] keys):
    """First-occurrence indices and inverse map via open-addressing hashing."""
    cdef Py_ssize_t M = keys.shape[0]
    cdef Py_ssize_t cap = 1
    while cap < 2 * M + 4:
        cap <<= 1
    cdef unsigned long mask = <unsigned long> (cap - 1)
    table_arr = np.full(cap, -1, dtype=np.int64)  # slot -> unique id
    slot_key_arr = np.empty(cap, dtype=np.int64)
    first_arr = np.empty(M, dtype=np.int64)
    inverse_arr = np.empty(M, dtype=np.int64)
    cdef long[::1] table = table_arr
    cdef long[::1] slot_key = slot_key_arr
    cdef long[::1] first = first_arr
    cdef long[::1] inverse = inverse_arr
    cdef Py_ssize_t m, n_unique = 0
    cdef long key, uid
    cdef unsigned long h
    with nogil:
        for m in range(M):
            key = keys[m]
            # Fibonacci hashing on the 64-bit key.
            h = (<unsigned long> key * 11400714819323198485UL) & mask
            while True:
                uid = table[h]
                if uid == -1:
                    table[h] = n_unique
                    slot_key[h] = key
                    first[n_unique] = m
                    inverse[m] = n_unique
                    n_unique += 1
                    break
                if slot_key[h] == key:
                    inverse[m] = uid
                    break
                h = (h + 1) & mask
    return first_arr[:n_unique].copy(), inverse_arr
