# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled GRU sequence kernels.

Same contract and gate layout as ``fedlaser._gru_py``; the time loop runs
without the GIL and every matrix product goes through BLAS dgemm.
"""

import numpy as np
cimport numpy as cnp
from libc.math cimport exp, tanh, fabs
from scipy.linalg.cython_blas cimport dgemm

cnp.import_array()


cdef inline void mm(bint ta, bint tb, int m, int n, int k,
                    double* A, int lda, double* B, int ldb,
                    double beta, double* C, int ldc) noexcept nogil:
    # Row-major C(m, n) = op(A) @ op(B) + beta * C, via column-major
    # C^T = op(B)^T @ op(A)^T.
    cdef char tra = b'T' if tb else b'N'
    cdef char trb = b'T' if ta else b'N'
    cdef double one = 1.0
    if m == 0 or n == 0:
        return
    dgemm(&tra, &trb, &n, &m, &k, &one, B, &ldb, A, &lda, &beta, C, &ldc)


cdef inline double sigm(double x) noexcept nogil:
    cdef double e = exp(-fabs(x))
    if x >= 0:
        return 1.0 / (1.0 + e)
    return e / (1.0 + e)


def gru_forward(x, W, U, b):
    """Return ``(hs, (gates, rh))`` for input ``x`` of shape (B, T, I)."""
    cdef double[:, :, ::1] X = np.ascontiguousarray(x, dtype=np.float64)
    cdef double[:, ::1] Wm = np.ascontiguousarray(W, dtype=np.float64)
    cdef double[:, ::1] Um = np.ascontiguousarray(U, dtype=np.float64)
    cdef double[::1] bv = np.ascontiguousarray(b, dtype=np.float64)
    cdef int nb = X.shape[0], T = X.shape[1], I = X.shape[2]
    cdef int H = Um.shape[0], H2 = 2 * Um.shape[0], H3 = 3 * Um.shape[0]

    hs_arr = np.empty((nb, T, H))
    gates_arr = np.empty((nb, T, H3))
    rh_arr = np.empty((nb, T, H))
    cdef double[:, :, ::1] hs = hs_arr
    cdef double[:, :, ::1] g = gates_arr
    cdef double[:, :, ::1] rh = rh_arr
    cdef double[:, ::1] tmp = np.zeros((max(nb, 1), H3))

    cdef int i, t, j
    cdef double hp, z, r, n
    if nb == 0 or T == 0:
        return hs_arr, (gates_arr, rh_arr)

    with nogil:
        # gate pre-activations from the input for every step at once
        mm(False, False, nb * T, H3, I, &X[0, 0, 0], I, &Wm[0, 0], H3, 0.0, &g[0, 0, 0], H3)
        for t in range(T):
            if t > 0:
                mm(False, False, nb, H2, H, &hs[0, t - 1, 0], T * H,
                   &Um[0, 0], H3, 0.0, &tmp[0, 0], H3)
            for i in range(nb):
                for j in range(H2):
                    g[i, t, j] = sigm(g[i, t, j] + bv[j] + (tmp[i, j] if t > 0 else 0.0))
                for j in range(H):
                    hp = hs[i, t - 1, j] if t > 0 else 0.0
                    rh[i, t, j] = g[i, t, H + j] * hp
            if t > 0:
                mm(False, False, nb, H, H, &rh[0, t, 0], T * H,
                   &Um[0, H2], H3, 0.0, &tmp[0, H2], H3)
            for i in range(nb):
                for j in range(H):
                    n = tanh(g[i, t, H2 + j] + bv[H2 + j] + (tmp[i, H2 + j] if t > 0 else 0.0))
                    g[i, t, H2 + j] = n
                    hp = hs[i, t - 1, j] if t > 0 else 0.0
                    z = g[i, t, j]
                    hs[i, t, j] = hp + z * (n - hp)
    return hs_arr, (gates_arr, rh_arr)


def gru_backward(dhs, x, W, U, hs, cache):
    """Backpropagate through time; return ``(dx, dW, dU, db)``."""
    gates, rh_in = cache
    cdef double[:, :, ::1] dH = np.ascontiguousarray(dhs, dtype=np.float64)
    cdef double[:, :, ::1] X = np.ascontiguousarray(x, dtype=np.float64)
    cdef double[:, ::1] Wm = np.ascontiguousarray(W, dtype=np.float64)
    cdef double[:, ::1] Um = np.ascontiguousarray(U, dtype=np.float64)
    cdef double[:, :, ::1] Hs = np.ascontiguousarray(hs, dtype=np.float64)
    cdef double[:, :, ::1] g = np.ascontiguousarray(gates, dtype=np.float64)
    cdef double[:, :, ::1] RH = np.ascontiguousarray(rh_in, dtype=np.float64)
    cdef int nb = X.shape[0], T = X.shape[1], I = X.shape[2]
    cdef int H = Um.shape[0], H2 = 2 * Um.shape[0], H3 = 3 * Um.shape[0]

    da_arr = np.zeros((nb, T, H3))
    dx_arr = np.zeros((nb, T, I))
    dW_arr = np.zeros((I, H3))
    dU_arr = np.zeros((H, H3))
    db_arr = np.zeros(H3)
    cdef double[:, :, ::1] da = da_arr
    cdef double[:, ::1] dWm = dW_arr
    cdef double[:, ::1] dUm = dU_arr
    cdef double[::1] dbv = db_arr
    cdef double[:, :, ::1] dX = dx_arr
    cdef double[:, ::1] dh = np.zeros((max(nb, 1), H))
    cdef double[:, ::1] drh = np.zeros((max(nb, 1), H))

    cdef int i, t, j
    cdef double hp, z, r, n, d
    if nb == 0 or T == 0:
        return dx_arr, dW_arr, dU_arr, db_arr

    with nogil:
        for t in range(T - 1, -1, -1):
            for i in range(nb):
                for j in range(H):
                    dh[i, j] = dh[i, j] + dH[i, t, j]
                    z = g[i, t, j]
                    n = g[i, t, H2 + j]
                    da[i, t, H2 + j] = dh[i, j] * z * (1.0 - n * n)
            mm(False, True, nb, H, H, &da[0, t, H2], T * H3, &Um[0, H2], H3,
               0.0, &drh[0, 0], H)
            for i in range(nb):
                for j in range(H):
                    hp = Hs[i, t - 1, j] if t > 0 else 0.0
                    z = g[i, t, j]
                    r = g[i, t, H + j]
                    n = g[i, t, H2 + j]
                    d = dh[i, j]
                    da[i, t, j] = d * (n - hp) * z * (1.0 - z)
                    da[i, t, H + j] = drh[i, j] * hp * r * (1.0 - r)
                    dh[i, j] = d * (1.0 - z) + drh[i, j] * r
            mm(False, True, nb, H, H2, &da[0, t, 0], T * H3, &Um[0, 0], H3,
               1.0, &dh[0, 0], H)
            if t > 0:
                mm(True, False, H, H2, nb, &Hs[0, t - 1, 0], T * H, &da[0, t, 0], T * H3,
                   1.0, &dUm[0, 0], H3)

        mm(True, False, H, H, nb * T, &RH[0, 0, 0], H, &da[0, 0, H2], H3,
           0.0, &dUm[0, H2], H3)
        mm(True, False, I, H3, nb * T, &X[0, 0, 0], I, &da[0, 0, 0], H3,
           0.0, &dWm[0, 0], H3)
        mm(False, True, nb * T, I, H3, &da[0, 0, 0], H3, &Wm[0, 0], H3,
           0.0, &dX[0, 0, 0], I)
        for i in range(nb):
            for t in range(T):
                for j in range(H3):
                    dbv[j] += da[i, t, j]
    return dx_arr, dW_arr, dU_arr, db_arr
