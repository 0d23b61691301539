# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled attention kernels.

Fused loops over the per-head matrices avoid the temporaries the NumPy
fallback allocates; at desk-scale shapes the per-call overhead dominates,
which is where these win. Semantics must stay bit-compatible with
xattn.kernels.fallback up to floating-point reassociation.
"""

import numpy as np

cimport numpy as cnp
from libc.math cimport exp

cnp.import_array()

BACKEND = "cython"


def attn_probs(cnp.ndarray q_in, cnp.ndarray k_in, double scale):
    cdef double[:, :, ::1] q = np.ascontiguousarray(q_in, dtype=np.float64)
    cdef double[:, :, ::1] k = np.ascontiguousarray(k_in, dtype=np.float64)
    cdef Py_ssize_t n_h = q.shape[0], n_q = q.shape[1], s = q.shape[2]
    cdef Py_ssize_t n_kv = k.shape[1]
    out_arr = np.empty((n_h, n_q, n_kv), dtype=np.float64)
    cdef double[:, :, ::1] out = out_arr
    cdef Py_ssize_t h, i, j, c
    cdef double acc, row_max, row_sum
    for h in range(n_h):
        for i in range(n_q):
            row_max = -1e300
            for j in range(n_kv):
                acc = 0.0
                for c in range(s):
                    acc += q[h, i, c] * k[h, j, c]
                acc *= scale
                out[h, i, j] = acc
                if acc > row_max:
                    row_max = acc
            row_sum = 0.0
            for j in range(n_kv):
                acc = exp(out[h, i, j] - row_max)
                out[h, i, j] = acc
                row_sum += acc
            for j in range(n_kv):
                out[h, i, j] /= row_sum
    return out_arr


def attn_mix(cnp.ndarray probs_in, cnp.ndarray v_in):
    cdef double[:, :, ::1] probs = np.ascontiguousarray(probs_in, dtype=np.float64)
    cdef double[:, :, ::1] v = np.ascontiguousarray(v_in, dtype=np.float64)
    cdef Py_ssize_t n_h = probs.shape[0], n_q = probs.shape[1], n_kv = probs.shape[2]
    cdef Py_ssize_t s = v.shape[2]
    out_arr = np.zeros((n_h, n_q, s), dtype=np.float64)
    cdef double[:, :, ::1] out = out_arr
    cdef Py_ssize_t h, i, j, c
    cdef double p
    for h in range(n_h):
        for i in range(n_q):
            for j in range(n_kv):
                p = probs[h, i, j]
                for c in range(s):
                    out[h, i, c] += p * v[h, j, c]
    return out_arr


def attn_mix_backward(cnp.ndarray probs_in, cnp.ndarray v_in, cnp.ndarray d_out_in):
    cdef double[:, :, ::1] probs = np.ascontiguousarray(probs_in, dtype=np.float64)
    cdef double[:, :, ::1] v = np.ascontiguousarray(v_in, dtype=np.float64)
    cdef double[:, :, ::1] d_out = np.ascontiguousarray(d_out_in, dtype=np.float64)
    cdef Py_ssize_t n_h = probs.shape[0], n_q = probs.shape[1], n_kv = probs.shape[2]
    cdef Py_ssize_t s = v.shape[2]
    d_probs_arr = np.empty((n_h, n_q, n_kv), dtype=np.float64)
    d_v_arr = np.zeros((n_h, n_kv, s), dtype=np.float64)
    cdef double[:, :, ::1] d_probs = d_probs_arr
    cdef double[:, :, ::1] d_v = d_v_arr
    cdef Py_ssize_t h, i, j, c
    cdef double acc, p
    for h in range(n_h):
        for i in range(n_q):
            for j in range(n_kv):
                acc = 0.0
                for c in range(s):
                    acc += d_out[h, i, c] * v[h, j, c]
                d_probs[h, i, j] = acc
                p = probs[h, i, j]
                for c in range(s):
                    d_v[h, j, c] += p * d_out[h, i, c]
    return d_probs_arr, d_v_arr


def attn_probs_backward(
    cnp.ndarray probs_in,
    cnp.ndarray q_in,
    cnp.ndarray k_in,
    double scale,
    cnp.ndarray d_probs_in,
):
    cdef double[:, :, ::1] probs = np.ascontiguousarray(probs_in, dtype=np.float64)
    cdef double[:, :, ::1] q = np.ascontiguousarray(q_in, dtype=np.float64)
    cdef double[:, :, ::1] k = np.ascontiguousarray(k_in, dtype=np.float64)
    cdef double[:, :, ::1] d_probs = np.ascontiguousarray(d_probs_in, dtype=np.float64)
    cdef Py_ssize_t n_h = probs.shape[0], n_q = probs.shape[1], n_kv = probs.shape[2]
    cdef Py_ssize_t s = q.shape[2]
    d_q_arr = np.zeros((n_h, n_q, s), dtype=np.float64)
    d_k_arr = np.zeros((n_h, n_kv, s), dtype=np.float64)
    cdef double[:, :, ::1] d_q = d_q_arr
    cdef double[:, :, ::1] d_k = d_k_arr
    cdef Py_ssize_t h, i, j, c
    cdef double inner, g
    for h in range(n_h):
        for i in range(n_q):
            inner = 0.0
            for j in range(n_kv):
                inner += d_probs[h, i, j] * probs[h, i, j]
            for j in range(n_kv):
                g = probs[h, i, j] * (d_probs[h, i, j] - inner) * scale
                for c in range(s):
                    d_q[h, i, c] += g * k[h, j, c]
                    d_k[h, j, c] += g * q[h, i, c]
    return d_q_arr, d_k_arr
