"""Compiled sequential kernels for the fused selective SSM (forward and backward).

One loop nest computes discretization, recurrence and readout per token, so
no ``[batch, T, d_inner, d_state]`` temporaries are created besides the
stored states. Used by :func:`mossnet.ssm_kernel.selective_ssm` when the
sequential method is requested.
"""

import math

import numpy as np
from numba import njit

SERIES_THRESHOLD = 1e-8
DPHI_SERIES = 1e-2


@njit(cache=True, inline="always")
def _phi(z):
    if abs(z) < SERIES_THRESHOLD:
        return 1.0 + 0.5 * z
    return math.expm1(z) / z


@njit(cache=True, inline="always")
def _dphi(z, ez, ph):
    if abs(z) < DPHI_SERIES:
        return 0.5 + z * (1.0 / 3.0 + z * (0.125 + z * (1.0 / 30.0 + z * (1.0 / 144.0 + z / 840.0))))
    return (ez - ph) / z


@njit(cache=True)
def ssm_forward(delta, A, B, C, u, s0):
    nb, T, di = delta.shape
    ds = A.shape[1]
    y = np.zeros((nb, T, di))
    states = np.empty((nb, T, di, ds))
    abar = np.empty((nb, T, di, ds))
    phis = np.empty((nb, T, di, ds))
    for b in range(nb):
        h = s0[b].copy()
        for t in range(T):
            for i in range(di):
                d = delta[b, t, i]
                ui = u[b, t, i]
                acc = 0.0
                for s in range(ds):
                    z = d * A[i, s]
                    em1 = math.expm1(z)
                    ez = em1 + 1.0
                    ph = 1.0 + 0.5 * z if abs(z) < SERIES_THRESHOLD else em1 / z
                    abar[b, t, i, s] = ez
                    phis[b, t, i, s] = ph
                    hv = ez * h[i, s] + d * ph * B[b, t, s] * ui
                    h[i, s] = hv
                    states[b, t, i, s] = hv
                    acc += C[b, t, s] * hv
                y[b, t, i] = acc
    return y, states, abar, phis


@njit(cache=True)
def ssm_backward(g, delta, A, B, C, u, s0, states, abar, phis):
    nb, T, di = delta.shape
    ds = A.shape[1]
    gdelta = np.zeros((nb, T, di))
    gA = np.zeros((di, ds))
    gB = np.zeros((nb, T, ds))
    gC = np.zeros((nb, T, ds))
    gu = np.zeros((nb, T, di))
    lam = np.zeros((di, ds))
    a_next = np.zeros((di, ds))
    for b in range(nb):
        lam[:, :] = 0.0
        a_next[:, :] = 0.0
        for t in range(T - 1, -1, -1):
            for i in range(di):
                d = delta[b, t, i]
                ui = u[b, t, i]
                gy = g[b, t, i]
                gd = 0.0
                gui = 0.0
                for s in range(ds):
                    a = A[i, s]
                    z = d * a
                    ez = abar[b, t, i, s]
                    ph = phis[b, t, i, s]
                    bs = B[b, t, s]
                    l = gy * C[b, t, s] + a_next[i, s] * lam[i, s]
                    lam[i, s] = l
                    a_next[i, s] = ez
                    prev = states[b, t - 1, i, s] if t > 0 else s0[b, i, s]
                    gC[b, t, s] += gy * states[b, t, i, s]
                    gui += l * d * ph * bs
                    gbb = l * ui
                    gB[b, t, s] += gbb * d * ph
                    gz = l * prev * ez + gbb * d * bs * _dphi(z, ez, ph)
                    gd += gz * a + gbb * ph * bs
                    gA[i, s] += gz * d
                gdelta[b, t, i] = gd
                gu[b, t, i] = gui
    return gdelta, gA, gB, gC, gu

