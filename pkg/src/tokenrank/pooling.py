"""Single-vector pooling: collapse a token set into one global descriptor."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from tokenrank.errors import DegenerateInputError, ValidationError
from tokenrank.store import TokenSet, load_store, write_store

POOL_METHODS = ("cls", "mean", "max", "gem")

GEM_CLAMP = 1e-6


@dataclass(eq=False)
class GlobalDescriptor:
    """One pooled, unit-norm vector per image."""

    image_id: str
    vector: np.ndarray
    method: str


def pool(ts: TokenSet, method: str, gem_p: float = 3.0,
         gem_clamp: float = GEM_CLAMP) -> GlobalDescriptor:
    """Pool a token set with the requested method and L2-normalize the result.

    cls returns the stored CLS vector; mean/max reduce per dimension over
    tokens; gem is the generalized mean of tokens clamped at ``gem_clamp``
    (activations can be negative, the plain p-th power is not defined there).
    """
    if method not in POOL_METHODS:
        raise ValidationError(f"unknown pooling method {method!r}")
    if method == "cls":
        if ts.cls is None:
            raise ValidationError(f"{ts.image_id}: cls pooling requires a stored CLS vector")
        pooled = ts.cls.astype(np.float64)
    elif method == "mean":
        pooled = ts.tokens.astype(np.float64).mean(axis=0)
    elif method == "max":
        pooled = ts.tokens.astype(np.float64).max(axis=0)
    else:
        if gem_p <= 0:
            raise ValidationError(f"gem requires p > 0, got {gem_p}")
        clamped = np.maximum(ts.tokens.astype(np.float64), gem_clamp)
        pooled = (clamped ** gem_p).mean(axis=0) ** (1.0 / gem_p)
    norm = float(np.linalg.norm(pooled))
    if norm < 1e-12:
        raise DegenerateInputError(f"{ts.image_id}: {method} pooling produced a zero vector")
    vector = (pooled / norm).astype(np.float32)
    return GlobalDescriptor(image_id=ts.image_id, vector=vector, method=method)


def pool_store(records: Iterable[TokenSet], method: str,
               gem_p: float = 3.0) -> list[GlobalDescriptor]:
    return [pool(ts, method, gem_p) for ts in records]


def write_descriptors(descriptors: Sequence[GlobalDescriptor], path: str | Path) -> int:
    """Persist descriptors as a token store with one token per record."""
    records = [
        TokenSet(
            image_id=d.image_id,
            tokens=d.vector[None, :],
            raw_norms=np.ones(1, dtype=np.float32),
        )
        for d in descriptors
    ]
    return write_store(records, path)


def read_descriptors(path: str | Path, method: str = "stored") -> list[GlobalDescriptor]:
    out = []
    for ts in load_store(path):
        if ts.n != 1:
            raise ValidationError(f"{ts.image_id}: descriptor record has {ts.n} rows")
        out.append(GlobalDescriptor(image_id=ts.image_id, vector=ts.tokens[0], method=method))
    return out
