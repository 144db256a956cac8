"""Multi-vector token storage with optional compression.

Codecs: f32 (identity), fp16 (round-to-nearest-even), int8 (per-vector
symmetric scalar quantization: scale = max|x|/127, D bytes + 4-byte scale),
and pq:m (product quantization, m sub-spaces with 256-centroid codebooks,
m bytes per token). Scoring always decodes back to f32 first.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from tokenrank.aggregation import InstanceTokenSet
from tokenrank.clustering import kmeans
from tokenrank.container import read_container, write_container
from tokenrank.errors import ValidationError
from tokenrank.store import TokenSet

CODEC_PATTERN = re.compile(r"^(f32|fp16|int8|pq:(\d+))$")

PQ_MIN_TRAIN = 256
PQ_DEFAULT_TRAIN_BUDGET = 131072
PQ_KMEANS_ITERS = 25
PQ_CENTROIDS = 256


def parse_codec(codec: str) -> tuple[str, int | None]:
    m = CODEC_PATTERN.match(codec)
    if not m:
        raise ValidationError(f"unknown codec {codec!r}")
    if m.group(2) is not None:
        return "pq", int(m.group(2))
    return codec, None


@dataclass(eq=False)
class MultiVectorStore:
    """Per-image token payloads under one codec, rows sorted by image id."""

    codec: str
    image_ids: list[str]
    offsets: np.ndarray          # (G+1,) int64 token-row offsets
    dim: int
    tokens_f32: np.ndarray | None = None
    tokens_f16: np.ndarray | None = None
    codes_i8: np.ndarray | None = None
    scales: np.ndarray | None = None
    pq_codes: np.ndarray | None = None        # (M, m) uint8
    pq_codebooks: np.ndarray | None = None    # (m, 256, D/m) f32
    _ids_key: tuple | None = field(default=None, repr=False)

    def __len__(self) -> int:
        return len(self.image_ids)

    @property
    def total_tokens(self) -> int:
        return int(self.offsets[-1])

    def ids_key(self) -> tuple:
        if self._ids_key is None:
            self._ids_key = (len(self.image_ids), hash(tuple(self.image_ids)))
        return self._ids_key

    @property
    def bytes_per_token(self) -> int:
        kind, m = parse_codec(self.codec)
        if kind == "f32":
            return 4 * self.dim
        if kind == "fp16":
            return 2 * self.dim
        if kind == "int8":
            return self.dim + 4
        return int(m)

    def token_count(self, row: int) -> int:
        return int(self.offsets[row + 1] - self.offsets[row])

    def decode_rows(self, rows: Sequence[int]) -> tuple[np.ndarray, np.ndarray]:
        """Decode candidate images to (flat f32 tokens, offsets)."""
        rows = np.asarray(rows, dtype=np.int64)
        counts = self.offsets[rows + 1] - self.offsets[rows]
        out_offsets = np.zeros(rows.shape[0] + 1, dtype=np.int64)
        np.cumsum(counts, out=out_offsets[1:])
        token_rows = np.concatenate(
            [np.arange(self.offsets[r], self.offsets[r + 1]) for r in rows]
        ) if rows.shape[0] else np.zeros(0, dtype=np.int64)
        return self._decode_token_rows(token_rows), out_offsets

    def decode_all(self) -> tuple[np.ndarray, np.ndarray]:
        return self._decode_token_rows(np.arange(self.total_tokens)), self.offsets.copy()

    def decode_image(self, row: int) -> np.ndarray:
        return self._decode_token_rows(
            np.arange(self.offsets[row], self.offsets[row + 1])
        )

    def _decode_token_rows(self, token_rows: np.ndarray) -> np.ndarray:
        kind, _ = parse_codec(self.codec)
        if kind == "f32":
            return np.ascontiguousarray(self.tokens_f32[token_rows])
        if kind == "fp16":
            return self.tokens_f16[token_rows].astype(np.float32)
        if kind == "int8":
            return (
                self.codes_i8[token_rows].astype(np.float32)
                * self.scales[token_rows, None]
            )
        codes = self.pq_codes[token_rows]
        m, _, sub = self.pq_codebooks.shape
        out = np.empty((codes.shape[0], self.dim), dtype=np.float32)
        for j in range(m):
            out[:, j * sub:(j + 1) * sub] = self.pq_codebooks[j][codes[:, j]]
        return out

    def subset(self, image_ids: Sequence[str]) -> "MultiVectorStore":
        """New store restricted to *image_ids* (kept in sorted order)."""
        pos = {gid: i for i, gid in enumerate(self.image_ids)}
        missing = [gid for gid in image_ids if gid not in pos]
        if missing:
            raise ValidationError(f"store is missing image {missing[0]!r}")
        keep = sorted(set(image_ids))
        rows = np.asarray([pos[g] for g in keep], dtype=np.int64)
        counts = self.offsets[rows + 1] - self.offsets[rows]
        offsets = np.zeros(rows.shape[0] + 1, dtype=np.int64)
        np.cumsum(counts, out=offsets[1:])
        token_rows = (
            np.concatenate([np.arange(self.offsets[r], self.offsets[r + 1]) for r in rows])
            if rows.shape[0]
            else np.zeros(0, dtype=np.int64)
        )

        def take(arr):
            return None if arr is None else np.ascontiguousarray(arr[token_rows])

        return MultiVectorStore(
            codec=self.codec,
            image_ids=keep,
            offsets=offsets,
            dim=self.dim,
            tokens_f32=take(self.tokens_f32),
            tokens_f16=take(self.tokens_f16),
            codes_i8=take(self.codes_i8),
            scales=take(self.scales),
            pq_codes=take(self.pq_codes),
            pq_codebooks=self.pq_codebooks,
        )

    def save(self, path: str | Path) -> None:
        ids_blob = "\n".join(self.image_ids).encode("utf-8")
        arrays = {
            "offsets": self.offsets,
            "ids": np.frombuffer(ids_blob, dtype=np.uint8).copy(),
        }
        for name in ("tokens_f32", "tokens_f16", "codes_i8", "scales",
                     "pq_codes", "pq_codebooks"):
            arr = getattr(self, name)
            if arr is not None:
                arrays[name] = arr
        write_container(path, {"kind": "mvstore", "codec": self.codec,
                               "dim": self.dim}, arrays)

    @classmethod
    def load(cls, path: str | Path) -> "MultiVectorStore":
        header, arrays = read_container(path)
        if header.get("kind") != "mvstore":
            raise ValidationError(f"{path}: not a multi-vector store file")
        ids_blob = arrays["ids"].tobytes().decode("utf-8")
        return cls(
            codec=header["codec"],
            image_ids=ids_blob.split("\n") if ids_blob else [],
            offsets=arrays["offsets"].astype(np.int64),
            dim=int(header["dim"]),
            tokens_f32=arrays.get("tokens_f32"),
            tokens_f16=arrays.get("tokens_f16"),
            codes_i8=arrays.get("codes_i8"),
            scales=arrays.get("scales"),
            pq_codes=arrays.get("pq_codes"),
            pq_codebooks=arrays.get("pq_codebooks"),
        )


def build_multivector_store(
    sets: Sequence[InstanceTokenSet | TokenSet],
) -> MultiVectorStore:
    """Pack token sets (sorted by image id) into an uncompressed f32 store."""
    def _id(s):
        return s.image_id

    def _tokens(s):
        return s.vectors if isinstance(s, InstanceTokenSet) else s.tokens

    ordered = sorted(sets, key=_id)
    ids = [_id(s) for s in ordered]
    if len(set(ids)) != len(ids):
        raise ValidationError("duplicate image_id in multi-vector store")
    if not ordered:
        raise ValidationError("cannot build an empty multi-vector store")
    dim = _tokens(ordered[0]).shape[1]
    mats = []
    offsets = np.zeros(len(ordered) + 1, dtype=np.int64)
    for i, s in enumerate(ordered):
        t = _tokens(s)
        if t.shape[1] != dim:
            raise ValidationError(f"{_id(s)}: dim {t.shape[1]} != {dim}")
        if t.shape[0] > 0xFFFF:
            raise ValidationError(f"{_id(s)}: too many tokens per image")
        mats.append(np.ascontiguousarray(t, dtype=np.float32))
        offsets[i + 1] = offsets[i] + t.shape[0]
    return MultiVectorStore(
        codec="f32",
        image_ids=ids,
        offsets=offsets,
        dim=int(dim),
        tokens_f32=np.concatenate(mats, axis=0),
    )


def int8_encode(tokens: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Per-vector symmetric scalar quantization. Returns (codes, scales)."""
    tokens = np.asarray(tokens, dtype=np.float32)
    scales = np.abs(tokens).max(axis=1) / np.float32(127.0)
    safe = np.where(scales == 0, np.float32(1.0), scales)
    codes = np.clip(np.rint(tokens / safe[:, None]), -127, 127).astype(np.int8)
    return codes, scales.astype(np.float32)


def quantize_store(
    store: MultiVectorStore,
    codec: str,
    train_sample: np.ndarray | None = None,
    rng_seed: int = 0,
) -> MultiVectorStore:
    """Re-encode a store under the requested codec (decoding first if needed)."""
    kind, m = parse_codec(codec)
    flat, offsets = store.decode_all()
    base = dict(image_ids=list(store.image_ids), offsets=offsets, dim=store.dim)
    if kind == "f32":
        return MultiVectorStore(codec="f32", tokens_f32=flat, **base)
    if kind == "fp16":
        return MultiVectorStore(codec="fp16", tokens_f16=flat.astype(np.float16), **base)
    if kind == "int8":
        codes, scales = int8_encode(flat)
        return MultiVectorStore(codec="int8", codes_i8=codes, scales=scales, **base)
    if store.dim % m != 0:
        raise ValidationError(f"dim {store.dim} not divisible by pq m={m}")
    sub = store.dim // m
    if train_sample is None:
        train = flat
        if train.shape[0] > PQ_DEFAULT_TRAIN_BUDGET:
            rng = np.random.default_rng(rng_seed)
            pick = rng.choice(train.shape[0], size=PQ_DEFAULT_TRAIN_BUDGET, replace=False)
            pick.sort()
            train = train[pick]
    else:
        train = np.asarray(train_sample, dtype=np.float32)
        if train.ndim != 2 or train.shape[1] != store.dim:
            raise ValidationError("pq training sample must be (n, dim)")
    if train.shape[0] < PQ_MIN_TRAIN:
        raise ValidationError(
            f"pq needs a training sample of >= {PQ_MIN_TRAIN} vectors, got {train.shape[0]}"
        )
    codebooks = np.empty((m, PQ_CENTROIDS, sub), dtype=np.float32)
    codes = np.empty((flat.shape[0], m), dtype=np.uint8)
    for j in range(m):
        block = train[:, j * sub:(j + 1) * sub].astype(np.float64)
        rng = np.random.default_rng([rng_seed, j])
        k = min(PQ_CENTROIDS, block.shape[0])
        centroids, _, _ = kmeans(block, k, PQ_KMEANS_ITERS, rng)
        if k < PQ_CENTROIDS:
            centroids = np.concatenate(
                [centroids, np.repeat(centroids[-1:], PQ_CENTROIDS - k, axis=0)]
            )
        codebooks[j] = centroids.astype(np.float32)
        target = flat[:, j * sub:(j + 1) * sub]
        d2 = (
            np.einsum("id,id->i", target, target)[:, None]
            - 2.0 * target @ codebooks[j].T
            + np.einsum("kd,kd->k", codebooks[j], codebooks[j])[None, :]
        )
        codes[:, j] = np.argmin(d2, axis=1).astype(np.uint8)
    return MultiVectorStore(
        codec=f"pq:{m}", pq_codes=codes, pq_codebooks=codebooks, **base
    )
