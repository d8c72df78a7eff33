import os
import runpy
import subprocess
import sys
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gsem import kernels
from gsem.kernels import python_backend

BACKENDS = [python_backend] + ([kernels.compiled_backend] if kernels.compiled_backend else [])


def random_csr(rng, n_rows, n_cols, density=0.4):
    dense = np.where(rng.random((n_rows, n_cols)) < density, rng.random((n_rows, n_cols)) * 3, 0.0)
    indptr, indices, values = [0], [], []
    for row in dense:
        nz = np.nonzero(row)[0]
        indices.extend(nz.tolist())
        values.extend(row[nz].tolist())
        indptr.append(len(indices))
    return dense, (np.array(indptr), np.array(indices, dtype=np.int64), np.array(values))


def numpy_cosine(dense):
    norms = np.linalg.norm(dense, axis=1)
    out = np.zeros((len(dense), len(dense)))
    for i in range(len(dense)):
        for j in range(len(dense)):
            if norms[i] > 0 and norms[j] > 0:
                out[i, j] = 1.0 if i == j else dense[i] @ dense[j] / (norms[i] * norms[j])
    return out


def test_backend_selected():
    assert kernels.BACKEND in ("cython", "python")
    assert (kernels.BACKEND == "cython") == (kernels.compiled_backend is not None)


def test_pure_python_env_forces_fallback():
    env = dict(os.environ, GSEM_PURE_PYTHON="1")
    out = subprocess.run([sys.executable, "-c", "from gsem import kernels; print(kernels.BACKEND)"],
                         env=env, capture_output=True, text=True, check=True)
    assert out.stdout.strip() == "python"


@pytest.mark.parametrize("backend", BACKENDS, ids=lambda b: b.__name__.rsplit(".", 1)[-1])
def test_cosine_small_example(backend):
    # rows (1,0,1), (0,0,0), (1,1,0)
    m = backend.sparse_cosine_matrix([0, 2, 2, 4], [0, 2, 0, 1], [1.0, 1.0, 1.0, 1.0])
    assert m[0, 2] == pytest.approx(0.5, abs=1e-15)
    assert m[1].tolist() == [0.0, 0.0, 0.0]
    assert m[0, 0] == 1.0


@pytest.mark.parametrize("backend", BACKENDS, ids=lambda b: b.__name__.rsplit(".", 1)[-1])
def test_dense_and_bm25_small_examples(backend):
    assert backend.dense_cosine([[3.0, 4.0], [0.0, 0.0]], [1.0, 0.0]).tolist() == [0.6, 0.0]
    assert backend.dense_cosine([[3.0, 4.0]], [0.0, 0.0]).tolist() == [0.0]
    # one document of length 2 holding term 0 twice, avgdl 2, idf 1
    s = backend.bm25_scores([0, 1], [0], [2.0], [2.0], 2.0, [1.0], [0], 1.2, 0.75)
    assert s[0] == pytest.approx(2 * 2.2 / (2 + 1.2), abs=1e-15)
    assert backend.bm25_scores([0, 1], [0], [1.0], [1.0], 0.0, [1.0], [0], 1.2, 0.75).tolist() == [0.0]


@settings(max_examples=60)
@given(st.integers(0, 2**32 - 1))
def test_sparse_cosine_backends_agree(seed):
    rng = np.random.default_rng(seed)
    dense, csr = random_csr(rng, int(rng.integers(1, 12)), int(rng.integers(1, 15)))
    ref = python_backend.sparse_cosine_matrix(*csr)
    assert np.allclose(ref, numpy_cosine(dense), atol=1e-12)
    for backend in BACKENDS[1:]:
        assert np.array_equal(backend.sparse_cosine_matrix(*csr), ref)


@settings(max_examples=60)
@given(st.integers(0, 2**32 - 1))
def test_dense_cosine_backends_agree(seed):
    rng = np.random.default_rng(seed)
    m = rng.standard_normal((int(rng.integers(1, 20)), int(rng.integers(1, 10))))
    q = rng.standard_normal(m.shape[1])
    ref = python_backend.dense_cosine(m, q)
    assert np.allclose(ref, m @ q / (np.linalg.norm(m, axis=1) * np.linalg.norm(q)), atol=1e-12)
    for backend in BACKENDS[1:]:
        assert np.array_equal(backend.dense_cosine(m, q), ref)


@settings(max_examples=60)
@given(st.integers(0, 2**32 - 1))
def test_bm25_backends_agree(seed):
    rng = np.random.default_rng(seed)
    n_terms = int(rng.integers(1, 10))
    dense, csr = random_csr(rng, int(rng.integers(1, 12)), n_terms)
    dense = np.ceil(dense)
    indptr, indices, _ = csr
    tfs = np.array([dense[d, t] for d in range(len(dense)) for t in indices[indptr[d]:indptr[d + 1]]])
    lens = dense.sum(axis=1)
    avgdl = float(lens.mean())
    idf = rng.random(n_terms) * 2
    q = rng.integers(0, n_terms, int(rng.integers(1, 5)))
    ref = python_backend.bm25_scores(indptr, indices, tfs, lens, avgdl, idf, q, 1.2, 0.75)
    if avgdl > 0:
        norm = 1.2 * (0.25 + 0.75 * lens / avgdl)
        expected = sum(idf[t] * dense[:, t] * 2.2 / (dense[:, t] + norm) for t in q)
        assert np.allclose(ref, expected, atol=1e-12)
    for backend in BACKENDS[1:]:
        assert np.array_equal(backend.bm25_scores(indptr, indices, tfs, lens, avgdl, idf, q, 1.2, 0.75), ref)


def test_benchmark_smoke(capsys):
    bench = runpy.run_path(str(Path(__file__).parents[1] / "benchmarks" / "bench_kernels.py"))
    assert bench["main"](["--scale", "0.05", "--repeat", "1"]) == 0
    assert "sparse_cosine_matrix" in capsys.readouterr().out
