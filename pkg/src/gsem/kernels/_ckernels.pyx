# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled kernels. Must stay bit-compatible with ``_pykernels``."""

import numpy as np
cimport numpy as cnp
from libc.math cimport sqrt

cnp.import_array()


def sparse_cosine_matrix(indptr, indices, values):
    cdef const long long[:] ip = np.ascontiguousarray(indptr, dtype=np.int64)
    cdef const long long[:] ix = np.ascontiguousarray(indices, dtype=np.int64)
    cdef const double[:] v = np.ascontiguousarray(values, dtype=np.float64)
    cdef Py_ssize_t n = ip.shape[0] - 1
    out_arr = np.zeros((n, n), dtype=np.float64)
    cdef double[:, :] out = out_arr
    norms_arr = np.zeros(n, dtype=np.float64)
    cdef double[:] norms = norms_arr
    cdef Py_ssize_t i, j
    cdef long long p, q, a1, q1
    cdef double s, dot, c
    for i in range(n):
        s = 0.0
        for p in range(ip[i], ip[i + 1]):
            s += v[p] * v[p]
        norms[i] = sqrt(s)
    for i in range(n):
        if norms[i] == 0.0:
            continue
        out[i, i] = 1.0
        a1 = ip[i + 1]
        for j in range(i + 1, n):
            if norms[j] == 0.0:
                continue
            p = ip[i]
            q = ip[j]
            q1 = ip[j + 1]
            dot = 0.0
            while p < a1 and q < q1:
                if ix[p] == ix[q]:
                    dot += v[p] * v[q]
                    p += 1
                    q += 1
                elif ix[p] < ix[q]:
                    p += 1
                else:
                    q += 1
            c = dot / (norms[i] * norms[j])
            out[i, j] = c
            out[j, i] = c
    return out_arr


def dense_cosine(matrix, query):
    cdef const double[:, :] m = np.ascontiguousarray(np.atleast_2d(matrix), dtype=np.float64)
    cdef const double[:] qv = np.ascontiguousarray(query, dtype=np.float64)
    cdef Py_ssize_t n = m.shape[0] if np.size(matrix) else 0
    cdef Py_ssize_t d = qv.shape[0]
    out_arr = np.zeros(n, dtype=np.float64)
    cdef double[:] out = out_arr
    cdef Py_ssize_t i, k
    cdef double qn = 0.0, dot, rn
    for k in range(d):
        qn += qv[k] * qv[k]
    qn = sqrt(qn)
    if qn == 0.0:
        return out_arr
    for i in range(n):
        dot = 0.0
        rn = 0.0
        for k in range(d):
            dot += m[i, k] * qv[k]
            rn += m[i, k] * m[i, k]
        if rn > 0.0:
            out[i] = dot / (sqrt(rn) * qn)
    return out_arr


def bm25_scores(indptr, indices, tfs, doc_len, double avgdl, idf, query_terms,
                double k1, double b):
    cdef const long long[:] ip = np.ascontiguousarray(indptr, dtype=np.int64)
    cdef const long long[:] ix = np.ascontiguousarray(indices, dtype=np.int64)
    cdef const double[:] tf = np.ascontiguousarray(tfs, dtype=np.float64)
    cdef const double[:] dl = np.ascontiguousarray(doc_len, dtype=np.float64)
    cdef const double[:] w = np.ascontiguousarray(idf, dtype=np.float64)
    cdef const long long[:] qt = np.ascontiguousarray(query_terms, dtype=np.int64)
    cdef Py_ssize_t n = ip.shape[0] - 1
    out_arr = np.zeros(n, dtype=np.float64)
    cdef double[:] out = out_arr
    cdef Py_ssize_t d, qi
    cdef long long p, t
    cdef double norm, s, f
    if avgdl <= 0.0:
        return out_arr
    for d in range(n):
        norm = k1 * (1.0 - b + b * dl[d] / avgdl)
        s = 0.0
        for qi in range(qt.shape[0]):
            t = qt[qi]
            for p in range(ip[d], ip[d + 1]):
                if ix[p] == t:
                    f = tf[p]
                    s += w[t] * (f * (k1 + 1.0)) / (f + norm)
                    break
        out[d] = s
    return out_arr
