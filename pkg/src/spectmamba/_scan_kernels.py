"""Compiled loops for the diagonal selective scan.

Layouts: ``u``/``delta``/``y`` are (batch, channels, time), ``A`` is
(channels, state), ``Bm``/``Cm`` are (batch, time, state), ``D`` is
(channels,). The hidden-state history ``H`` is (batch, channels, time, state).
"""

import numba
import numpy as np


@numba.njit(cache=True, fastmath=True)
def scan_forward(u, delta, A, Bm, Cm, D, keep_states):
    nb, nc, nt = u.shape
    ns = A.shape[1]
    y = np.empty_like(u)
    if keep_states:
        H = np.empty((nb, nc, nt, ns), dtype=u.dtype)
    else:
        H = np.empty((0, 0, 0, 0), dtype=u.dtype)
    h = np.zeros(ns, dtype=u.dtype)
    for b in range(nb):
        for c in range(nc):
            h[:] = 0.0
            for t in range(nt):
                dt = delta[b, c, t]
                ut = u[b, c, t]
                acc = D[c] * ut
                for n in range(ns):
                    h[n] = np.exp(dt * A[c, n]) * h[n] + dt * Bm[b, t, n] * ut
                    acc += Cm[b, t, n] * h[n]
                y[b, c, t] = acc
                if keep_states:
                    for n in range(ns):
                        H[b, c, t, n] = h[n]
    return y, H


@numba.njit(cache=True, fastmath=True)
def scan_backward(gy, u, delta, A, Bm, Cm, D, H):
    nb, nc, nt = u.shape
    ns = A.shape[1]
    gu = np.zeros_like(u)
    gdelta = np.zeros_like(delta)
    gA = np.zeros_like(A)
    gB = np.zeros_like(Bm)
    gC = np.zeros_like(Cm)
    gD = np.zeros_like(D)
    gh = np.zeros(ns, dtype=u.dtype)
    for b in range(nb):
        for c in range(nc):
            gh[:] = 0.0
            for t in range(nt - 1, -1, -1):
                g = gy[b, c, t]
                dt = delta[b, c, t]
                ut = u[b, c, t]
                gut = g * D[c]
                gD[c] += g * ut
                gdt = 0.0
                for n in range(ns):
                    gC[b, t, n] += g * H[b, c, t, n]
                    ghn = gh[n] + g * Cm[b, t, n]
                    decay = np.exp(dt * A[c, n])
                    hprev = H[b, c, t - 1, n] if t > 0 else 0.0
                    gdt += ghn * (hprev * decay * A[c, n] + Bm[b, t, n] * ut)
                    gA[c, n] += ghn * hprev * decay * dt
                    gB[b, t, n] += ghn * dt * ut
                    gut += ghn * dt * Bm[b, t, n]
                    gh[n] = ghn * decay
                gdelta[b, c, t] = gdt
                gu[b, c, t] = gut
    return gu, gdelta, gA, gB, gC, gD
