"""Fused loops for the monotonic-attention core.

One pass per query row computes gamma, the distance product, the decayed
scores and the masked softmax, touching only the causal triangle. The
backward kernel replays the same recurrences in reverse.
"""

import math

import numba
import numpy as np

EXP_FLOOR = -60.0


@numba.njit(cache=True)
def attention_core_fwd(logits, rel, theta, strict):
    B, H, T, _ = logits.shape
    alpha = np.zeros_like(logits)
    gamma = np.zeros_like(logits)
    prod = np.zeros_like(logits)
    dec = np.zeros_like(logits)
    for b in range(B):
        for h in range(H):
            th = theta[h]
            for t in range(T):
                L = logits[b, h, t]
                m = -np.inf
                for j in range(t + 1):
                    if rel[b, t, j] and L[j] > m:
                        m = L[j]
                if m == -np.inf:
                    continue
                z = 0.0
                for j in range(t + 1):
                    if rel[b, t, j]:
                        e = math.exp(L[j] - m)
                        gamma[b, h, t, j] = e
                        z += e
                for j in range(t + 1):
                    gamma[b, h, t, j] /= z
                p = 1.0
                for j in range(t, -1, -1):
                    prod[b, h, t, j] = p
                    if rel[b, t, j]:
                        p *= gamma[b, h, t, j]
                last = t - 1 if strict else t
                ms = -np.inf
                for j in range(last + 1):
                    ex = -th * (t - j) * prod[b, h, t, j]
                    if ex < EXP_FLOOR:
                        ex = EXP_FLOOR
                    dj = math.exp(ex)
                    dec[b, h, t, j] = dj
                    if rel[b, t, j]:
                        s = dj * L[j]
                        alpha[b, h, t, j] = s
                        if s > ms:
                            ms = s
                if ms == -np.inf:
                    for j in range(last + 1):
                        alpha[b, h, t, j] = 0.0
                    continue
                z = 0.0
                for j in range(last + 1):
                    if rel[b, t, j]:
                        e = math.exp(alpha[b, h, t, j] - ms)
                        alpha[b, h, t, j] = e
                        z += e
                for j in range(last + 1):
                    alpha[b, h, t, j] /= z
    return alpha, gamma, prod, dec


@numba.njit(cache=True)
def attention_core_bwd(g_alpha, logits, rel, theta, strict, alpha, gamma, prod, dec):
    B, H, T, _ = logits.shape
    g_logits = np.zeros_like(logits)
    g_theta = np.zeros(H)
    gP = np.zeros(T)
    for b in range(B):
        for h in range(H):
            th = theta[h]
            for t in range(T):
                last = t - 1 if strict else t
                A = alpha[b, h, t]
                G = g_alpha[b, h, t]
                L = logits[b, h, t]
                dot = 0.0
                for j in range(last + 1):
                    dot += G[j] * A[j]
                for j in range(t + 1):
                    gP[j] = 0.0
                for j in range(last + 1):
                    if A[j] == 0.0:
                        continue
                    gs = A[j] * (G[j] - dot)
                    dj = dec[b, h, t, j]
                    g_logits[b, h, t, j] += gs * dj
                    pj = prod[b, h, t, j]
                    if -th * (t - j) * pj > EXP_FLOOR:
                        ge = gs * L[j] * dj
                        g_theta[h] -= ge * (t - j) * pj
                        gP[j] = -th * ge * (t - j)
                # prod[j] = f[j+1] * prod[j+1] with f = gamma where related, else 1
                gam = gamma[b, h, t]
                carry = 0.0
                dotg = 0.0
                for j in range(t):
                    carry += gP[j]
                    if rel[b, t, j + 1]:
                        gg = carry * prod[b, h, t, j + 1]
                        g_logits[b, h, t, j + 1] += gam[j + 1] * gg
                        dotg += gg * gam[j + 1]
                        carry *= gam[j + 1]
                for j in range(t + 1):
                    if rel[b, t, j]:
                        g_logits[b, h, t, j] -= gam[j] * dotg
    return g_logits, g_theta
