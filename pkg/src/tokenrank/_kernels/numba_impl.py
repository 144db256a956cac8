"""Numba-compiled kernels for the scoring and sampling inner loops.

All kernels are nopython, nogil (so a thread pool over queries scales), and
use fixed reduction orders: results are bit-stable across runs and across
worker counts. Signatures are declared so compilation happens at import and
is cached on disk.
"""

from __future__ import annotations

import numpy as np
from numba import njit

BACKEND = "numba"


@njit("float32(float32[:, ::1], float32[:, ::1])", cache=True, nogil=True)
def maxsim_score(tq, tg):
    # Strict index-ascending f32 accumulation, per the scoring contract.
    kq, d = tq.shape
    kg = tg.shape[0]
    total = np.float32(0.0)
    for i in range(kq):
        best = np.float32(-np.inf)
        for j in range(kg):
            acc = np.float32(0.0)
            for c in range(d):
                acc += tq[i, c] * tg[j, c]
            if acc > best:
                best = acc
        total += best
    return total / np.float32(kq)


@njit(
    "float32[::1](float32[:, ::1], float32[:, ::1], int64[::1])",
    cache=True,
    nogil=True,
)
def maxsim_batch(tq, flat, offsets):
    # Gallery row in the outer loop so flat streams through memory once; the
    # 8-lane striped f32 dot keeps a fixed deterministic reduction order while
    # breaking the serial dependency chain of a strictly ascending loop.
    n_cand = offsets.shape[0] - 1
    kq, d = tq.shape
    out = np.empty(n_cand, dtype=np.float32)
    best = np.empty(kq, dtype=np.float32)
    d8 = d - (d % 8)
    for c in range(n_cand):
        for i in range(kq):
            best[i] = np.float32(-np.inf)
        for j in range(offsets[c], offsets[c + 1]):
            for i in range(kq):
                a0 = np.float32(0.0)
                a1 = np.float32(0.0)
                a2 = np.float32(0.0)
                a3 = np.float32(0.0)
                a4 = np.float32(0.0)
                a5 = np.float32(0.0)
                a6 = np.float32(0.0)
                a7 = np.float32(0.0)
                for b in range(0, d8, 8):
                    a0 += tq[i, b] * flat[j, b]
                    a1 += tq[i, b + 1] * flat[j, b + 1]
                    a2 += tq[i, b + 2] * flat[j, b + 2]
                    a3 += tq[i, b + 3] * flat[j, b + 3]
                    a4 += tq[i, b + 4] * flat[j, b + 4]
                    a5 += tq[i, b + 5] * flat[j, b + 5]
                    a6 += tq[i, b + 6] * flat[j, b + 6]
                    a7 += tq[i, b + 7] * flat[j, b + 7]
                acc = ((a0 + a1) + (a2 + a3)) + ((a4 + a5) + (a6 + a7))
                for b in range(d8, d):
                    acc += tq[i, b] * flat[j, b]
                if acc > best[i]:
                    best[i] = acc
        total = np.float32(0.0)
        for i in range(kq):
            total += best[i]
        out[c] = total / np.float32(kq)
    return out


@njit("int64[::1](float32[:, ::1], int64, int64)", cache=True, nogil=True)
def fps_select(tokens, start, k):
    n, d = tokens.shape
    out = np.empty(k, dtype=np.int64)
    chosen = np.zeros(n, dtype=np.bool_)
    min_dist = np.empty(n, dtype=np.float32)
    out[0] = start
    chosen[start] = True
    for i in range(n):
        acc = np.float32(0.0)
        for c in range(d):
            acc += tokens[i, c] * tokens[start, c]
        min_dist[i] = np.float32(1.0) - acc
    for t in range(1, k):
        best = np.float32(-np.inf)
        best_i = -1
        for i in range(n):
            if not chosen[i] and min_dist[i] > best:
                best = min_dist[i]
                best_i = i
        out[t] = best_i
        chosen[best_i] = True
        for i in range(n):
            acc = np.float32(0.0)
            for c in range(d):
                acc += tokens[i, c] * tokens[best_i, c]
            dist = np.float32(1.0) - acc
            if dist < min_dist[i]:
                min_dist[i] = dist
    return out
