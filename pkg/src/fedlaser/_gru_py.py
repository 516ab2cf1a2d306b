"""Pure-numpy GRU sequence kernels (fallback for the compiled ``_gru_ext``).

Gate layout along the last axis of ``W``/``U``/``b``: update z, reset r,
candidate n. Cell::

    z = sigmoid(x W_z + h U_z + b_z)
    r = sigmoid(x W_r + h U_r + b_r)
    n = tanh(x W_n + (r * h) U_n + b_n)
    h' = (1 - z) * h + z * n
"""

import numpy as np


def _sigmoid(x):
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def gru_forward(x, W, U, b):
    """Return ``(hs, (gates, rh))`` for input ``x`` of shape (B, T, I)."""
    B, T, _ = x.shape
    H = U.shape[0]
    xw = (x.reshape(B * T, x.shape[2]) @ W + b).reshape(B, T, 3 * H)
    Uzr = U[:, : 2 * H]
    Un = U[:, 2 * H:]
    hs = np.empty((B, T, H))
    gates = np.empty((B, T, 3 * H))
    rh = np.empty((B, T, H))
    h = np.zeros((B, H))
    for t in range(T):
        zr = _sigmoid(xw[:, t, : 2 * H] + h @ Uzr)
        z = zr[:, :H]
        r = zr[:, H:]
        rh_t = r * h
        n = np.tanh(xw[:, t, 2 * H:] + rh_t @ Un)
        h = h + z * (n - h)
        hs[:, t] = h
        gates[:, t, : 2 * H] = zr
        gates[:, t, 2 * H:] = n
        rh[:, t] = rh_t
    return hs, (gates, rh)


def gru_backward(dhs, x, W, U, hs, cache):
    """Backpropagate through time; return ``(dx, dW, dU, db)``."""
    gates, rh = cache
    B, T, I = x.shape
    H = U.shape[0]
    Uzr_T = U[:, : 2 * H].T
    Un_T = U[:, 2 * H:].T
    da = np.empty((B, T, 3 * H))
    hprev = np.zeros((B, T, H))
    hprev[:, 1:] = hs[:, :-1]
    dh = np.zeros((B, H))
    for t in range(T - 1, -1, -1):
        dh = dh + dhs[:, t]
        z = gates[:, t, :H]
        r = gates[:, t, H: 2 * H]
        n = gates[:, t, 2 * H:]
        hp = hprev[:, t]
        dan = dh * z * (1.0 - n * n)
        drh = dan @ Un_T
        daz = dh * (n - hp) * z * (1.0 - z)
        dar = drh * hp * r * (1.0 - r)
        da[:, t, :H] = daz
        da[:, t, H: 2 * H] = dar
        da[:, t, 2 * H:] = dan
        dh = dh * (1.0 - z) + drh * r + da[:, t, : 2 * H] @ Uzr_T
    flat = da.reshape(B * T, 3 * H)
    dW = x.reshape(B * T, I).T @ flat
    dU = np.empty_like(U)
    dU[:, : 2 * H] = hprev.reshape(B * T, H).T @ flat[:, : 2 * H]
    dU[:, 2 * H:] = rh.reshape(B * T, H).T @ flat[:, 2 * H:]
    db = flat.sum(axis=0)
    dx = (flat @ W.T).reshape(B, T, I)
    return dx, dW, dU, db
