# cython: boundscheck=False, wraparound=False, cdivision=True
"""Compiled block-tridiagonal solve kernel.

Forward block elimination with per-block Cholesky pivots and back
substitution, specialized for small dense blocks (the window systems use
10x10 blocks).  The pure-python fallback in ``solver.py`` implements the
same contract.
"""

import numpy as np

cimport cython
from libc.math cimport sqrt


cdef int _cholesky(double* a, int b) noexcept nogil:
    """In-place lower Cholesky of the b x b row-major matrix ``a``.

    Returns 0 on success, 1 if a pivot is not positive.
    """
    cdef int i, j, k
    cdef double s
    for j in range(b):
        s = a[j * b + j]
        for k in range(j):
            s -= a[j * b + k] * a[j * b + k]
        if s <= 0.0:
            return 1
        a[j * b + j] = sqrt(s)
        for i in range(j + 1, b):
            s = a[i * b + j]
            for k in range(j):
                s -= a[i * b + k] * a[j * b + k]
            a[i * b + j] = s / a[j * b + j]
    return 0


cdef void _chol_solve(double* l, double* x, int b) noexcept nogil:
    """Solve (L L^T) x = rhs in place, with L lower triangular."""
    cdef int i, k
    cdef double s
    for i in range(b):
        s = x[i]
        for k in range(i):
            s -= l[i * b + k] * x[k]
        x[i] = s / l[i * b + i]
    for i in range(b - 1, -1, -1):
        s = x[i]
        for k in range(i + 1, b):
            s -= l[k * b + i] * x[k]
        x[i] = s / l[i * b + i]


def block_tridiag_solve(double[:, :, ::1] diag, double[:, :, ::1] sub, double[:, ::1] rhs):
    """Solve the symmetric block-tridiagonal system in one sweep.

    ``diag`` holds the n diagonal blocks M[i,i], ``sub`` the n-1 subdiagonal
    blocks M[i+1,i]; the superdiagonal is sub[i]^T by symmetry.  Returns
    (x, info): info == 0 on success, i+1 when the Schur complement at block i
    lost positive definiteness.
    """
    cdef Py_ssize_t n = diag.shape[0]
    cdef int b = <int> diag.shape[1]
    cdef Py_ssize_t i
    cdef int r, c, k, info

    piv_np = np.empty((n, b, b))
    w_np = np.empty((n - 1 if n > 1 else 0, b, b))
    x_np = np.array(rhs, copy=True)
    cdef double[:, :, ::1] piv = piv_np
    cdef double[:, :, ::1] w = w_np
    cdef double[:, ::1] x = x_np
    cdef double s

    info = 0
    with nogil:
        for i in range(n):
            # piv[i] = diag[i] - sub[i-1] @ w[i-1]
            for r in range(b):
                for c in range(b):
                    s = diag[i, r, c]
                    if i > 0:
                        for k in range(b):
                            s -= sub[i - 1, r, k] * w[i - 1, k, c]
                    piv[i, r, c] = s
            # x[i] -= sub[i-1] @ x[i-1]   (x[i-1] already holds piv^{-1} y)
            if i > 0:
                for r in range(b):
                    s = 0.0
                    for k in range(b):
                        s += sub[i - 1, r, k] * x[i - 1, k]
                    x[i, r] -= s
            if _cholesky(&piv[i, 0, 0], b):
                info = <int> (i + 1)
                break
            # w[i] = piv[i]^{-1} @ sub[i]^T  (needed for the next elimination
            # step and for back substitution)
            if i < n - 1:
                for c in range(b):
                    for r in range(b):
                        w[i, r, c] = sub[i, c, r]
                for c in range(b):
                    _chol_solve_col(&piv[i, 0, 0], &w[i, 0, 0], c, b)
            _chol_solve(&piv[i, 0, 0], &x[i, 0], b)
        if info == 0:
            # back substitution: x[i] -= w[i] @ x[i+1]
            for i in range(n - 2, -1, -1):
                for r in range(b):
                    s = 0.0
                    for k in range(b):
                        s += w[i, r, k] * x[i + 1, k]
                    x[i, r] -= s
    return x_np, info


cdef void _chol_solve_col(double* l, double* m, int col, int b) noexcept nogil:
    """Apply the Cholesky solve to column ``col`` of the b x b matrix ``m``."""
    cdef int i, k
    cdef double s
    for i in range(b):
        s = m[i * b + col]
        for k in range(i):
            s -= l[i * b + k] * m[k * b + col]
        m[i * b + col] = s / l[i * b + i]
    for i in range(b - 1, -1, -1):
        s = m[i * b + col]
        for k in range(i + 1, b):
            s -= l[k * b + i] * m[k * b + col]
        m[i * b + col] = s / l[i * b + i]
