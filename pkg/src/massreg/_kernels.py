"""Compiled inner loops (Gauss-Seidel sweeps on CSR matrices)."""

import numba
import numpy as np


@numba.njit(cache=True)
def gs_forward(indptr, indices, data, b, x):
    """One forward lexicographic Gauss-Seidel sweep, in place."""
    n = b.shape[0]
    for i in range(n):
        s = 0.0
        d = 0.0
        for k in range(indptr[i], indptr[i + 1]):
            j = indices[k]
            v = data[k]
            if j == i:
                d += v
            else:
                s += v * x[j]
        x[i] = (b[i] - s) / d


def gs_sweeps(mat, b, x, sweeps: int):
    """Run forward sweeps of Gauss-Seidel for mat @ x = b, in place."""
    for _ in range(sweeps):
        gs_forward(mat.indptr, mat.indices, mat.data, b, x)
    return x


def warmup():
    """Trigger JIT compilation on a tiny system."""
    indptr = np.array([0, 1, 2], dtype=np.int32)
    indices = np.array([0, 1], dtype=np.int32)
    data = np.array([2.0, 2.0])
    x = np.zeros(2)
    gs_forward(indptr, indices, data, np.ones(2), x)
