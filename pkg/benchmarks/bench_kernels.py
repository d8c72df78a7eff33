"""Compare the compiled kernels with the pure-Python fallback.

    python benchmarks/bench_kernels.py [--repeat 5] [--scale 1.0]

Inputs are drawn from a fixed PCG64 stream. Every timed call is also
checked for bit-identical output between the two backends.
"""

from __future__ import annotations

import argparse
import sys
import timeit

import numpy as np

from gsem import kernels
from gsem.kernels import python_backend


def sparse_rows(rng, n_rows, n_cols, per_row):
    indptr, indices, values = [0], [], []
    for _ in range(n_rows):
        cols = np.sort(rng.choice(n_cols, size=per_row, replace=False))
        indices.extend(cols.tolist())
        values.extend((rng.random(per_row) * 3 + 0.1).tolist())
        indptr.append(len(indices))
    return np.array(indptr), np.array(indices, dtype=np.int64), np.array(values)


def cases(scale):
    rng = np.random.default_rng(12345)
    n = max(10, int(300 * scale))
    csr = sparse_rows(rng, n, 400, 8)
    m = rng.standard_normal((int(5000 * scale) or 1, 64))
    q = rng.standard_normal(64)
    docs = max(10, int(3000 * scale))
    indptr, indices, tfs = sparse_rows(rng, docs, 500, 3)
    tfs = np.ceil(tfs)
    lens = np.add.reduceat(tfs, indptr[:-1])
    idf = rng.random(500) * 2
    terms = rng.integers(0, 500, 4)
    return [
        (f"sparse_cosine_matrix {n}x{n}", "sparse_cosine_matrix", csr),
        (f"dense_cosine {m.shape[0]}x64", "dense_cosine", (m, q)),
        (f"bm25_scores {docs} docs", "bm25_scores",
         (indptr, indices, tfs, lens, float(lens.mean()), idf, terms, 1.2, 0.75)),
    ]


def best_of(fn, args, repeat):
    return min(timeit.repeat(lambda: fn(*args), number=1, repeat=repeat))


def main(argv=None) -> int:
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--repeat", type=int, default=5)
    p.add_argument("--scale", type=float, default=1.0, help="multiply input sizes")
    args = p.parse_args(argv)
    compiled = kernels.compiled_backend
    if compiled is None:
        print("compiled kernels are not built; only the Python fallback is available")
    print(f"{'kernel':34s} {'python ms':>10s} {'cython ms':>10s} {'speedup':>8s}  identical")
    for label, name, call_args in cases(args.scale):
        py_fn = getattr(python_backend, name)
        t_py = best_of(py_fn, call_args, args.repeat)
        if compiled is None:
            print(f"{label:34s} {t_py * 1e3:10.2f} {'-':>10s} {'-':>8s}  -")
            continue
        c_fn = getattr(compiled, name)
        t_c = best_of(c_fn, call_args, args.repeat)
        same = np.array_equal(py_fn(*call_args), c_fn(*call_args))
        print(f"{label:34s} {t_py * 1e3:10.2f} {t_c * 1e3:10.2f} {t_py / t_c:7.1f}x  {same}")
        if not same:
            return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
