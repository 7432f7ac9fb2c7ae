"""Fixed-order dense contraction used by every Conv2D/FC forward pass.

BLAS sgemm picks blocking and micro-kernels from the matrix shape, so the
value of one output column can change by an ulp when columns are appended
(duplicated channels) or rows are removed (smaller batches).  Hardening
transparency needs bitwise stability under both, so the forward pass
accumulates each output element sequentially over K, one product and one
rounding at a time, in the dtype of the operands.
"""

import numpy as np
from numba import njit


@njit(cache=True)
def _matmul_seq(a, b, out):
    m_dim, k_dim = a.shape
    n_dim = b.shape[1]
    for m in range(m_dim):
        for k in range(k_dim):
            av = a[m, k]
            for n in range(n_dim):
                out[m, n] += av * b[k, n]
    return out


def matmul_fixed(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """``a @ b`` with sequential accumulation over the shared axis."""
    a = np.ascontiguousarray(a)
    b = np.ascontiguousarray(b, dtype=a.dtype)
    out = np.zeros((a.shape[0], b.shape[1]), dtype=a.dtype)
    if a.shape[0] == 0 or b.shape[1] == 0:
        return out
    return _matmul_seq(a, b, out)


def matmul_reference(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    # pure-numpy twin of matmul_fixed, kept for cross-checking the jit kernel
    out = np.zeros((a.shape[0], b.shape[1]), dtype=a.dtype)
    for k in range(a.shape[1]):
        out += a[:, k : k + 1] * b[k]
    return out
