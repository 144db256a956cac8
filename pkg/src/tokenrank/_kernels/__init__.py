"""Kernel backend selection.

Default is the numba implementation; set TOKENRANK_NO_NUMBA=1 to force the
pure-numpy fallback (also used automatically when numba cannot be imported).
"""

from __future__ import annotations

import os


def _numba_disabled() -> bool:
    return os.environ.get("TOKENRANK_NO_NUMBA", "").strip().lower() in {"1", "true", "yes", "on"}


if _numba_disabled():
    from tokenrank._kernels import numpy_impl as _impl
else:
    try:
        from tokenrank._kernels import numba_impl as _impl
    except ImportError:  # pragma: no cover - exercised only without numba
        from tokenrank._kernels import numpy_impl as _impl

BACKEND = _impl.BACKEND
maxsim_score = _impl.maxsim_score
maxsim_batch = _impl.maxsim_batch
fps_select = _impl.fps_select

__all__ = ["BACKEND", "maxsim_score", "maxsim_batch", "fps_select"]
