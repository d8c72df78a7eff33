"""Pure-Python kernels.

Reference implementations for the compiled module in ``_ckernels.pyx``.
Both accumulate in the same order so results agree bit-for-bit.
"""

from __future__ import annotations

import math

import numpy as np


def sparse_cosine_matrix(indptr, indices, values):
    """All-pairs cosine similarity of CSR rows with sorted column indices.

    Rows with zero norm have similarity 0 with everything, themselves included.
    """
    indptr = np.asarray(indptr, dtype=np.int64).tolist()
    indices = np.asarray(indices, dtype=np.int64).tolist()
    values = np.asarray(values, dtype=np.float64).tolist()
    n = len(indptr) - 1
    out = np.zeros((n, n), dtype=np.float64)
    norms = []
    for i in range(n):
        s = 0.0
        for p in range(indptr[i], indptr[i + 1]):
            s += values[p] * values[p]
        norms.append(math.sqrt(s))
    for i in range(n):
        if norms[i] == 0.0:
            continue
        out[i, i] = 1.0
        a0, a1 = indptr[i], indptr[i + 1]
        for j in range(i + 1, n):
            if norms[j] == 0.0:
                continue
            p, q = a0, indptr[j]
            q1 = indptr[j + 1]
            dot = 0.0
            while p < a1 and q < q1:
                ip, iq = indices[p], indices[q]
                if ip == iq:
                    dot += values[p] * values[q]
                    p += 1
                    q += 1
                elif ip < iq:
                    p += 1
                else:
                    q += 1
            c = dot / (norms[i] * norms[j])
            out[i, j] = c
            out[j, i] = c
    return out


def dense_cosine(matrix, query):
    """Cosine of each row of ``matrix`` against ``query``; zero rows score 0."""
    rows = np.asarray(matrix, dtype=np.float64).tolist()
    qv = np.asarray(query, dtype=np.float64).tolist()
    qn = 0.0
    for x in qv:
        qn += x * x
    qn = math.sqrt(qn)
    out = np.zeros(len(rows), dtype=np.float64)
    if qn == 0.0:
        return out
    for i, row in enumerate(rows):
        dot = 0.0
        rn = 0.0
        for k in range(len(qv)):
            dot += row[k] * qv[k]
            rn += row[k] * row[k]
        if rn > 0.0:
            out[i] = dot / (math.sqrt(rn) * qn)
    return out


def bm25_scores(indptr, indices, tfs, doc_len, avgdl, idf, query_terms, k1, b):
    """Okapi BM25 score of every CSR document row for a bag of query term ids.

    ``idf`` is indexed by term id. Repeated query terms count repeatedly.
    """
    indptr = np.asarray(indptr, dtype=np.int64).tolist()
    indices = np.asarray(indices, dtype=np.int64).tolist()
    tfs = np.asarray(tfs, dtype=np.float64).tolist()
    doc_len = np.asarray(doc_len, dtype=np.float64).tolist()
    idf = np.asarray(idf, dtype=np.float64).tolist()
    query_terms = np.asarray(query_terms, dtype=np.int64).tolist()
    n = len(indptr) - 1
    out = np.zeros(n, dtype=np.float64)
    if avgdl <= 0.0:
        return out
    for d in range(n):
        norm = k1 * (1.0 - b + b * doc_len[d] / avgdl)
        s = 0.0
        for t in query_terms:
            for p in range(indptr[d], indptr[d + 1]):
                if indices[p] == t:
                    f = tfs[p]
                    s += idf[t] * (f * (k1 + 1.0)) / (f + norm)
                    break
        out[d] = s
    return out
