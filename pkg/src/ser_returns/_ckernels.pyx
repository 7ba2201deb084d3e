# cython: language_level=3
"""Compiled kernels: batched masked softmax and the collapsed-Gibbs sweep."""
import numpy as np
cimport numpy as cnp
from libc.math cimport exp

cnp.import_array()


def masked_softmax_fwd(double[:, :, ::1] x, cnp.uint8_t[:, :, ::1] mask):
    cdef Py_ssize_t B = x.shape[0], R = x.shape[1], C = x.shape[2]
    out_arr = np.zeros((B, R, C), dtype=np.float64)
    cdef double[:, :, ::1] out = out_arr
    cdef Py_ssize_t b, r, c
    cdef double m, total, v
    cdef bint seen
    with nogil:
        for b in range(B):
            for r in range(R):
                seen = False
                m = 0.0
                for c in range(C):
                    if mask[b, r, c]:
                        if not seen or x[b, r, c] > m:
                            m = x[b, r, c]
                        seen = True
                if not seen:
                    continue
                total = 0.0
                for c in range(C):
                    if mask[b, r, c]:
                        v = exp(x[b, r, c] - m)
                        out[b, r, c] = v
                        total += v
                for c in range(C):
                    out[b, r, c] = out[b, r, c] / total
    return out_arr


def masked_softmax_bwd(double[:, :, ::1] s, double[:, :, ::1] grad):
    cdef Py_ssize_t B = s.shape[0], R = s.shape[1], C = s.shape[2]
    out_arr = np.empty((B, R, C), dtype=np.float64)
    cdef double[:, :, ::1] out = out_arr
    cdef Py_ssize_t b, r, c
    cdef double inner
    with nogil:
        for b in range(B):
            for r in range(R):
                inner = 0.0
                for c in range(C):
                    inner += grad[b, r, c] * s[b, r, c]
                for c in range(C):
                    out[b, r, c] = s[b, r, c] * (grad[b, r, c] - inner)
    return out_arr


def gibbs_sweep(cnp.int64_t[::1] words, cnp.int64_t[::1] docs, cnp.int64_t[::1] z,
                cnp.int64_t[:, ::1] n_dk, cnp.int64_t[:, ::1] n_kw, cnp.int64_t[::1] n_k,
                double[::1] uniforms, double alpha, double beta):
    cdef Py_ssize_t n = words.shape[0]
    cdef Py_ssize_t K = n_k.shape[0]
    cdef double vbeta = n_kw.shape[1] * beta
    cdef double[::1] p = np.empty(K, dtype=np.float64)
    cdef Py_ssize_t i, k, w, d, k_old, k_new
    cdef double total, target
    with nogil:
        for i in range(n):
            w = words[i]
            d = docs[i]
            k_old = z[i]
            n_dk[d, k_old] -= 1
            n_kw[k_old, w] -= 1
            n_k[k_old] -= 1
            total = 0.0
            for k in range(K):
                total += (n_dk[d, k] + alpha) * (n_kw[k, w] + beta) / (n_k[k] + vbeta)
                p[k] = total
            target = uniforms[i] * total
            k_new = K - 1
            for k in range(K):
                if p[k] > target:
                    k_new = k
                    break
            z[i] = k_new
            n_dk[d, k_new] += 1
            n_kw[k_new, w] += 1
            n_k[k_new] += 1
