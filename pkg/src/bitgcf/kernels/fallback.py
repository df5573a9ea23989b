"""Pure NumPy/SciPy implementations of the compiled kernels.

Semantically identical to ``bitgcf.kernels._core``; used when the extension
is unavailable or when ``BITGCF_BACKEND=fallback`` forces it.
"""

import numpy as np
from scipy import sparse


def propagate_csr(indptr, indices, weights, x, out):
    n = len(indptr) - 1
    mat = sparse.csr_matrix((weights, indices, indptr), shape=(n, x.shape[0]))
    np.copyto(out, mat @ x)


def score_int8(table, query, out):
    # int8 @ int8 would accumulate in int8 and overflow; widen first
    np.copyto(out, table.astype(np.int32) @ query.astype(np.int32))


def score_f32(table, query, out):
    np.copyto(out, table @ query)
