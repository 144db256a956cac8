from __future__ import annotations

import numpy as np
import pytest


def unit_rows(rng: np.random.Generator, n: int, d: int) -> np.ndarray:
    """Random unit-norm f32 rows."""
    x = rng.standard_normal((n, d))
    x /= np.linalg.norm(x, axis=1, keepdims=True)
    return x.astype(np.float32)


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(1234)
