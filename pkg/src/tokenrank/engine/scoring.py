"""Late-interaction (MaxSim) scoring between token sets."""

from __future__ import annotations

import numpy as np

from tokenrank import _kernels
from tokenrank.errors import ValidationError


def _prep(arr: np.ndarray, name: str) -> np.ndarray:
    out = np.ascontiguousarray(arr, dtype=np.float32)
    if out.ndim != 2 or out.shape[0] == 0:
        raise ValidationError(f"{name} token set must be a non-empty 2-D matrix")
    if not out.flags.writeable:
        out = out.copy()
    return out


def late_interaction_score(query_tokens: np.ndarray, gallery_tokens: np.ndarray) -> float:
    """Mean over query tokens of the max inner product against gallery tokens.

    Both sets must hold unit-norm rows of the same dim; the result lies in
    [-1, 1]. Scores are asymmetric: swapping the arguments averages over the
    other side's tokens.
    """
    tq = _prep(query_tokens, "query")
    tg = _prep(gallery_tokens, "gallery")
    if tq.shape[1] != tg.shape[1]:
        raise ValidationError(
            f"dim mismatch: query D={tq.shape[1]}, gallery D={tg.shape[1]}"
        )
    return float(_kernels.maxsim_score(tq, tg))


def maxsim_many(query_tokens: np.ndarray, flat: np.ndarray, offsets: np.ndarray) -> np.ndarray:
    """Batch MaxSim of one query against candidates packed in *flat*."""
    tq = _prep(query_tokens, "query")
    flat = _prep(flat, "candidates")
    offsets = np.ascontiguousarray(offsets, dtype=np.int64)
    if tq.shape[1] != flat.shape[1]:
        raise ValidationError("dim mismatch between query and candidate tokens")
    return _kernels.maxsim_batch(tq, flat, offsets)
