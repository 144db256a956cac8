"""Exact flat inner-product index: the Stage-1 shortlister."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from tokenrank.container import read_container, write_container
from tokenrank.errors import ValidationError
from tokenrank.pooling import GlobalDescriptor


@dataclass(eq=False)
class FlatIndex:
    """Gallery ids (ascending) with their unit Stage-1 vectors, row-aligned."""

    image_ids: list[str]
    matrix: np.ndarray
    method: str = ""
    _ids_key: tuple | None = field(default=None, repr=False)

    @property
    def dim(self) -> int:
        return int(self.matrix.shape[1])

    def __len__(self) -> int:
        return len(self.image_ids)

    def ids_key(self) -> tuple:
        if self._ids_key is None:
            self._ids_key = (len(self.image_ids), hash(tuple(self.image_ids)))
        return self._ids_key

    def save(self, path: str | Path) -> None:
        ids_blob = "\n".join(self.image_ids).encode("utf-8")
        write_container(
            path,
            {"kind": "flat_index", "method": self.method, "count": len(self.image_ids)},
            {"matrix": np.ascontiguousarray(self.matrix, dtype=np.float32),
             "ids": np.frombuffer(ids_blob, dtype=np.uint8).copy()},
        )

    @classmethod
    def load(cls, path: str | Path) -> "FlatIndex":
        header, arrays = read_container(path)
        if header.get("kind") != "flat_index":
            raise ValidationError(f"{path}: not a flat index file")
        ids_blob = arrays["ids"].tobytes().decode("utf-8")
        image_ids = ids_blob.split("\n") if ids_blob else []
        return cls(image_ids=image_ids, matrix=arrays["matrix"],
                   method=header.get("method", ""))


def build_flat_index(descriptors: Sequence[GlobalDescriptor]) -> FlatIndex:
    """Sort descriptors by image id and stack their vectors."""
    seen = set()
    for d in descriptors:
        if d.image_id in seen:
            raise ValidationError(f"duplicate image_id {d.image_id!r}")
        seen.add(d.image_id)
    ordered = sorted(descriptors, key=lambda d: d.image_id)
    if not ordered:
        return FlatIndex(image_ids=[], matrix=np.zeros((0, 0), dtype=np.float32))
    dim = ordered[0].vector.shape[0]
    for d in ordered:
        if d.vector.shape[0] != dim:
            raise ValidationError(f"{d.image_id}: dim {d.vector.shape[0]} != {dim}")
    matrix = np.stack([d.vector for d in ordered]).astype(np.float32)
    return FlatIndex(
        image_ids=[d.image_id for d in ordered],
        matrix=matrix,
        method=ordered[0].method,
    )


def top_s_rows(scores: np.ndarray, s: int) -> np.ndarray:
    """Exact top-s row indices by score desc, ties by ascending row (== id).

    Rows must already be in ascending-id order.
    """
    g = scores.shape[0]
    s = min(s, g)
    if s == g:
        return np.argsort(-scores, kind="stable")
    part = np.argpartition(-scores, s - 1)[:s]
    cutoff = scores[part].min()
    above = np.flatnonzero(scores > cutoff)
    at = np.flatnonzero(scores == cutoff)
    chosen = np.concatenate([above, at[: s - above.shape[0]]])
    return chosen[np.argsort(-scores[chosen], kind="stable")]


def search_flat(index: FlatIndex, query: GlobalDescriptor, s: int) -> list[tuple[str, float]]:
    """Exact top-s by inner product; s is clamped to the gallery size."""
    if len(index) == 0:
        raise ValidationError("empty index")
    if query.vector.shape[0] != index.dim:
        raise ValidationError(
            f"dim mismatch: query D={query.vector.shape[0]}, index D={index.dim}"
        )
    scores = index.matrix @ query.vector
    rows = top_s_rows(scores, s)
    return [(index.image_ids[i], float(scores[i])) for i in rows]
