"""Numeric kernels with a compiled fast path.

The Cython module is used when it was built; otherwise the pure-Python
implementation is loaded. Set ``GSEM_PURE_PYTHON=1`` to force the fallback.
``BACKEND`` names the active implementation.
"""

import os

from . import _pykernels as python_backend

compiled_backend = None
if os.environ.get("GSEM_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from . import _ckernels as compiled_backend  # type: ignore[no-redef]
    except ImportError:  # extension not built
        compiled_backend = None

_active = compiled_backend if compiled_backend is not None else python_backend
BACKEND = "cython" if compiled_backend is not None else "python"

sparse_cosine_matrix = _active.sparse_cosine_matrix
dense_cosine = _active.dense_cosine
bm25_scores = _active.bm25_scores

__all__ = [
    "BACKEND",
    "bm25_scores",
    "compiled_backend",
    "dense_cosine",
    "python_backend",
    "sparse_cosine_matrix",
]
