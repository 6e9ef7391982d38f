# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled dense MLP kernels; same contract as ``fedmix._pykernels``.

Matrix products go straight to BLAS ``dgemm`` on the row-major buffers
(as transposed column-major operands); bias, rectifier and masking are fused
loops. This skips the per-call temporaries of the numpy version, which
dominate at the small batch and layer sizes used in simulation.
"""
import numpy as np

from scipy.linalg.cython_blas cimport dgemm


cdef void _matmul(bint ta, bint tb, int m, int n, int k, double* A, int lda, double* B, int ldb,
                  double* C, int ldc) noexcept nogil:
    # column-major C(m x n) = op(A) op(B)
    cdef char ca = b'T' if ta else b'N'
    cdef char cb = b'T' if tb else b'N'
    cdef double one = 1.0, zero = 0.0
    dgemm(&ca, &cb, &m, &n, &k, &one, A, &lda, B, &ldb, &zero, C, &ldc)


def mlp_forward(list weights, list biases, double[:, ::1] X):
    cdef Py_ssize_t L = len(weights)
    cdef int n = X.shape[0]
    cdef Py_ssize_t l, i, j
    cdef int n_in, n_out
    cdef double[:, ::1] a = X
    cdef double[:, ::1] W
    cdef double[:, ::1] z
    cdef double[::1] b
    cdef bint hidden
    acts = [np.asarray(X)]
    for l in range(L):
        W = weights[l]
        b = biases[l]
        n_in = W.shape[0]
        n_out = W.shape[1]
        hidden = l < L - 1
        out = np.empty((n, n_out))
        z = out
        if n > 0:
            with nogil:
                # row-major Z = A W  <=>  column-major Z^T = W^T A^T
                _matmul(False, False, n_out, n, n_in, &W[0, 0], n_out, &a[0, 0], n_in, &z[0, 0], n_out)
                for i in range(n):
                    for j in range(n_out):
                        z[i, j] += b[j]
                        if hidden and z[i, j] < 0.0:
                            z[i, j] = 0.0
        acts.append(out)
        a = z
    return acts


def mlp_backward(list weights, list acts, double[:, ::1] G, G_pen=None):
    cdef Py_ssize_t L = len(weights)
    cdef int n = G.shape[0]
    cdef Py_ssize_t l, i, j
    cdef int n_in, n_out
    cdef double[:, ::1] delta = G
    cdef double[:, ::1] a_in
    cdef double[:, ::1] W
    cdef double[:, ::1] gw
    cdef double[::1] gb
    cdef double[:, ::1] nd
    cdef double[:, ::1] gp
    cdef bint add_pen
    dW = [None] * L
    db = [None] * L
    for l in range(L - 1, -1, -1):
        a_in = acts[l]
        W = weights[l]
        n_in = W.shape[0]
        n_out = W.shape[1]
        gw_arr = np.zeros((n_in, n_out))
        gb_arr = np.zeros(n_out)
        gw = gw_arr
        gb = gb_arr
        if n > 0:
            with nogil:
                # row-major dW = A^T D  <=>  column-major dW^T = D^T A
                _matmul(False, True, n_out, n_in, n, &delta[0, 0], n_out, &a_in[0, 0], n_in, &gw[0, 0], n_out)
                for i in range(n):
                    for j in range(n_out):
                        gb[j] += delta[i, j]
        dW[l] = gw_arr
        db[l] = gb_arr
        if l == 0:
            break
        nd_arr = np.zeros((n, n_in))
        nd = nd_arr
        add_pen = l == L - 1 and G_pen is not None
        if add_pen:
            gp = G_pen
        if n > 0:
            with nogil:
                # row-major N = D W^T  <=>  column-major N^T = W D^T
                _matmul(True, False, n_in, n, n_out, &W[0, 0], n_out, &delta[0, 0], n_out, &nd[0, 0], n_in)
                for i in range(n):
                    for j in range(n_in):
                        if add_pen:
                            nd[i, j] += gp[i, j]
                        # rectifier subgradient is 0 at 0
                        if a_in[i, j] <= 0.0:
                            nd[i, j] = 0.0
        delta = nd
    return dW, db
