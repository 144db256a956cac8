"""Pure-numpy kernels: the fallback path when numba is disabled or missing.

Same contracts as the numba implementations; the batch scorer leans on one
BLAS GEMM per candidate block instead of explicit loops.
"""

from __future__ import annotations

import numpy as np

BACKEND = "numpy"

# Candidate columns per GEMM block; bounds the similarity-matrix footprint.
_BLOCK_COLS = 262144


def maxsim_score(tq: np.ndarray, tg: np.ndarray) -> np.float32:
    sims = tq @ tg.T
    best = sims.max(axis=1)
    return np.float32(best.sum(dtype=np.float32) / np.float32(tq.shape[0]))


def maxsim_batch(tq: np.ndarray, flat: np.ndarray, offsets: np.ndarray) -> np.ndarray:
    """Score one query token set against candidates packed row-wise in *flat*.

    offsets has C+1 entries; candidate c owns rows offsets[c]:offsets[c+1].
    """
    n_cand = offsets.shape[0] - 1
    out = np.empty(n_cand, dtype=np.float32)
    kq = np.float32(tq.shape[0])
    counts = np.diff(offsets)
    uniform = n_cand > 0 and bool(np.all(counts == counts[0])) and counts[0] > 0
    lo = 0
    while lo < n_cand:
        hi = lo
        while hi < n_cand and offsets[hi + 1] - offsets[lo] <= _BLOCK_COLS:
            hi += 1
        hi = max(hi, lo + 1)
        sims = tq @ flat[offsets[lo]:offsets[hi]].T
        base = offsets[lo]
        if uniform:
            k = int(counts[0])
            per_cand = sims.reshape(tq.shape[0], hi - lo, k).max(axis=2)
            out[lo:hi] = per_cand.sum(axis=0, dtype=np.float32) / kq
        else:
            for c in range(lo, hi):
                window = sims[:, offsets[c] - base:offsets[c + 1] - base]
                out[c] = window.max(axis=1).sum(dtype=np.float32) / kq
        lo = hi
    return out


def fps_select(tokens: np.ndarray, start: int, k: int) -> np.ndarray:
    """Greedy farthest-point sampling in cosine distance, ties to lowest index."""
    n = tokens.shape[0]
    chosen = np.zeros(n, dtype=np.bool_)
    out = np.empty(k, dtype=np.int64)
    out[0] = start
    chosen[start] = True
    min_dist = np.float32(1.0) - tokens @ tokens[start]
    for t in range(1, k):
        masked = np.where(chosen, np.float32(-np.inf), min_dist)
        nxt = int(np.argmax(masked))
        out[t] = nxt
        chosen[nxt] = True
        min_dist = np.minimum(min_dist, np.float32(1.0) - tokens @ tokens[nxt])
    return out
