# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled single-threaded kernels for the hot loops.

All kernels write into caller-provided output buffers and loop in row order,
so results are deterministic and match the pure-NumPy fallback.
"""


def propagate_csr(const long long[::1] indptr,
                  const int[::1] indices,
                  const double[::1] weights,
                  const double[:, ::1] x,
                  double[:, ::1] out):
    """out[r] = sum_k weights[k] * x[indices[k]] over row r's CSR range."""
    cdef Py_ssize_t num_rows = indptr.shape[0] - 1
    cdef Py_ssize_t dim = x.shape[1]
    cdef Py_ssize_t r, k, j, col
    cdef double w
    for r in range(num_rows):
        for j in range(dim):
            out[r, j] = 0.0
        for k in range(indptr[r], indptr[r + 1]):
            col = indices[k]
            w = weights[k]
            for j in range(dim):
                out[r, j] += w * x[col, j]


def score_int8(const signed char[:, ::1] table,
               const signed char[::1] query,
               int[::1] out):
    """Integer inner products of query against every table row (int32 accumulate)."""
    cdef Py_ssize_t n = table.shape[0]
    cdef Py_ssize_t dim = table.shape[1]
    cdef Py_ssize_t i, j
    cdef int acc
    for i in range(n):
        acc = 0
        for j in range(dim):
            acc += <int> table[i, j] * <int> query[j]
        out[i] = acc


def score_f32(const float[:, ::1] table,
              const float[::1] query,
              float[::1] out):
    """fp32 inner products of query against every table row (fp32 accumulate)."""
    cdef Py_ssize_t n = table.shape[0]
    cdef Py_ssize_t dim = table.shape[1]
    cdef Py_ssize_t i, j
    cdef float acc
    for i in range(n):
        acc = 0.0
        for j in range(dim):
            acc += table[i, j] * query[j]
        out[i] = acc
