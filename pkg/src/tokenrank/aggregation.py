"""Compress N patch tokens into K instance tokens.

Pipeline: pick K seed tokens, assign every other token to seeds by cosine
similarity, then emit one unit vector per seed combining the seed with the
(weighted) mean of its assigned tokens. Per-image k-means (centroid or
medoid) is provided as the iterative-clustering alternative.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from tokenrank import _kernels
from tokenrank._hashing import per_image_seed
from tokenrank.clustering import kmeans_pp_init, lloyd
from tokenrank.errors import DegenerateInputError, ValidationError
from tokenrank.store import TokenSet, write_store

SEED_STRATEGIES = (
    "attention",
    "fps",
    "norm",
    "norm_x_attn",
    "random",
    "grid",
    "cls_sim",
    "cls_dist",
)
ASSIGN_MODES = ("hard_top1", "soft_top2", "soft_top4", "group_dense")

# Floor of the mean-term denominator; an empty cluster divides by this and
# contributes nothing, so the seed passes through verbatim.
MEAN_EPS = 1.0


@dataclass(frozen=True)
class SeedSelection:
    strategy: str
    k: int
    rng_seed: int = 0


@dataclass(eq=False)
class Assignment:
    """Token-to-seed weights. Row t describes non-seed token token_indices[t];
    its weight on seed rank seed_ranks[t, p] is weights[t, p]."""

    mode: str
    token_indices: np.ndarray
    seed_ranks: np.ndarray
    weights: np.ndarray
    tau: float = 1.0
    sim_evals: int = 0


@dataclass(eq=False)
class InstanceTokenSet:
    image_id: str
    vectors: np.ndarray
    seed_indices: np.ndarray
    provenance: dict = field(default_factory=dict)

    @property
    def k(self) -> int:
        return int(self.vectors.shape[0])

    @property
    def dim(self) -> int:
        return int(self.vectors.shape[1])

    def to_token_set(self) -> TokenSet:
        return TokenSet(
            image_id=self.image_id,
            tokens=self.vectors,
            raw_norms=np.ones(self.k, dtype=np.float32),
        )


def _writable_f32(arr: np.ndarray) -> np.ndarray:
    out = np.ascontiguousarray(arr, dtype=np.float32)
    if not out.flags.writeable:
        out = out.copy()
    return out


def _top_k_desc(values: np.ndarray, k: int) -> np.ndarray:
    # stable sort on the negated values: ties resolve to the lowest index
    return np.argsort(-values, kind="stable")[:k].astype(np.int64)


def select_seeds(ts: TokenSet, sel: SeedSelection) -> np.ndarray:
    """Return K distinct token indices in strategy rank order."""
    n = ts.n
    if sel.k < 1:
        raise ValidationError(f"{ts.image_id}: K must be >= 1")
    if sel.k > n:
        raise ValidationError(f"{ts.image_id}: K={sel.k} exceeds token count N={n}")
    strategy = sel.strategy
    if strategy not in SEED_STRATEGIES:
        raise ValidationError(f"unknown seed strategy {strategy!r}")
    if strategy in ("attention", "norm_x_attn") and ts.attention is None:
        raise ValidationError(f"{ts.image_id}: {strategy} seeding requires attention")
    if strategy in ("cls_sim", "cls_dist") and ts.cls is None:
        raise ValidationError(f"{ts.image_id}: {strategy} seeding requires a CLS vector")

    if strategy == "attention":
        return _top_k_desc(ts.attention, sel.k)
    if strategy == "norm":
        return _top_k_desc(ts.raw_norms, sel.k)
    if strategy == "norm_x_attn":
        return _top_k_desc(ts.raw_norms * ts.attention, sel.k)
    if strategy == "random":
        rng = np.random.default_rng(per_image_seed(sel.rng_seed, ts.image_id))
        return rng.choice(n, size=sel.k, replace=False).astype(np.int64)
    if strategy == "grid":
        idx = np.minimum(np.floor(np.arange(sel.k) * n / sel.k + 0.5).astype(np.int64), n - 1)
        seen: set[int] = set()
        picked = [i for i in idx.tolist() if not (i in seen or seen.add(i))]
        for pad in range(n):
            if len(picked) == sel.k:
                break
            if pad not in seen:
                picked.append(pad)
                seen.add(pad)
        return np.asarray(picked, dtype=np.int64)
    if strategy == "cls_sim":
        return _top_k_desc(ts.tokens @ ts.cls, sel.k)
    if strategy == "cls_dist":
        sims = ts.tokens @ ts.cls
        return np.argsort(sims, kind="stable")[:sel.k].astype(np.int64)
    # fps: anchor on the most salient token, then greedy max-min cosine
    if ts.attention is not None:
        start = int(np.argmax(ts.attention))
    else:
        start = int(np.argmax(ts.raw_norms))
    return _kernels.fps_select(_writable_f32(ts.tokens), start, sel.k)


def assign_tokens(
    ts: TokenSet,
    seeds: np.ndarray,
    mode: str,
    tau: float = 1.0,
) -> Assignment:
    """Assign every non-seed token to seeds; seeds themselves join no cluster."""
    if mode not in ASSIGN_MODES:
        raise ValidationError(f"unknown assignment mode {mode!r}")
    if tau <= 0:
        raise ValidationError(f"temperature must be > 0, got {tau}")
    seeds = np.asarray(seeds, dtype=np.int64)
    k = seeds.shape[0]
    if k < 1 or np.unique(seeds).shape[0] != k or seeds.min() < 0 or seeds.max() >= ts.n:
        raise ValidationError(f"{ts.image_id}: invalid seed index set")
    if mode == "soft_top2":
        m = 2
    elif mode == "soft_top4":
        m = 4
    else:
        m = k
    if mode.startswith("soft_") and m > k:
        raise ValidationError(f"{mode} requires K >= {m}, got K={k}")

    sims = ts.tokens @ ts.tokens[seeds].T  # (N, K) cosines; N*K evaluations
    non_seed = np.setdiff1d(np.arange(ts.n, dtype=np.int64), seeds)
    rows = sims[non_seed]

    if mode == "hard_top1":
        ranks = np.argmax(rows, axis=1)[:, None].astype(np.int64)
        weights = np.ones((non_seed.shape[0], 1), dtype=np.float32)
    elif mode == "group_dense":
        ranks = np.broadcast_to(np.arange(k, dtype=np.int64), rows.shape).copy()
        weights = _softmax_rows(rows.astype(np.float64), tau)
    else:
        ranks = np.argsort(-rows, axis=1, kind="stable")[:, :m].astype(np.int64)
        picked = np.take_along_axis(rows, ranks, axis=1)
        weights = _softmax_rows(picked.astype(np.float64), tau)
    return Assignment(
        mode=mode,
        token_indices=non_seed,
        seed_ranks=ranks,
        weights=weights,
        tau=tau,
        sim_evals=int(ts.n) * int(k),
    )


def _softmax_rows(values: np.ndarray, tau: float) -> np.ndarray:
    shifted = (values - values.max(axis=1, keepdims=True)) / tau
    e = np.exp(shifted)
    return (e / e.sum(axis=1, keepdims=True)).astype(np.float32)


def aggregate(ts: TokenSet, seeds: np.ndarray, asg: Assignment) -> InstanceTokenSet:
    """Combine each seed with the weighted mean of its assigned tokens.

    z_k = L2(seed_k + sum_i w_ik t_i / max(sum_i w_ik, 1)); a cluster with no
    mass returns its seed verbatim.
    """
    seeds = np.asarray(seeds, dtype=np.int64)
    k = seeds.shape[0]
    d = ts.dim
    acc = np.zeros((k, d), dtype=np.float64)
    wsum = np.zeros(k, dtype=np.float64)
    if asg.token_indices.shape[0]:
        tok = ts.tokens[asg.token_indices].astype(np.float64)
        for p in range(asg.seed_ranks.shape[1]):
            ranks = asg.seed_ranks[:, p]
            w = asg.weights[:, p].astype(np.float64)
            np.add.at(acc, ranks, tok * w[:, None])
            np.add.at(wsum, ranks, w)
    vectors = np.empty((k, d), dtype=np.float32)
    seed_tokens = ts.tokens[seeds]
    for j in range(k):
        if wsum[j] == 0.0:
            vectors[j] = seed_tokens[j]
            continue
        z = seed_tokens[j].astype(np.float64) + acc[j] / max(wsum[j], MEAN_EPS)
        norm = float(np.linalg.norm(z))
        if norm < 1e-6:
            raise DegenerateInputError(
                f"{ts.image_id}: degenerate instance token for seed rank {j}"
            )
        vectors[j] = (z / norm).astype(np.float32)
    return InstanceTokenSet(
        image_id=ts.image_id,
        vectors=vectors,
        seed_indices=seeds,
        provenance={"mode": asg.mode, "k": int(k), "tau": asg.tau,
                    "sim_evals": asg.sim_evals},
    )


def build_instance_tokens(
    ts: TokenSet,
    strategy: str,
    mode: str,
    k: int,
    tau: float = 1.0,
    rng_seed: int = 0,
) -> InstanceTokenSet:
    """select_seeds + assign_tokens + aggregate in one call."""
    sel = SeedSelection(strategy=strategy, k=k, rng_seed=rng_seed)
    seeds = select_seeds(ts, sel)
    asg = assign_tokens(ts, seeds, mode, tau)
    out = aggregate(ts, seeds, asg)
    out.provenance["strategy"] = strategy
    out.provenance["rng_seed"] = rng_seed
    return out


def kmeans_per_image(
    ts: TokenSet,
    k: int,
    iters: int = 20,
    rng_seed: int = 0,
    variant: str = "centroid",
) -> InstanceTokenSet:
    """Per-image Lloyd clustering baseline (centroid or medoid output)."""
    if variant not in ("centroid", "medoid"):
        raise ValidationError(f"unknown k-means variant {variant!r}")
    if k > ts.n:
        raise ValidationError(f"{ts.image_id}: K={k} exceeds token count N={ts.n}")
    rng = np.random.default_rng(per_image_seed(rng_seed, ts.image_id))
    points = ts.tokens.astype(np.float64)
    init = kmeans_pp_init(points, k, rng)
    centroids, labels, _ = lloyd(points, points[init], iters)
    if variant == "medoid":
        vectors = np.empty((k, ts.dim), dtype=np.float32)
        members_idx = np.empty(k, dtype=np.int64)
        for j in range(k):
            members = np.flatnonzero(labels == j)
            dist = np.linalg.norm(points[members] - centroids[j], axis=1)
            members_idx[j] = members[int(np.argmin(dist))]
            vectors[j] = ts.tokens[members_idx[j]]
        seed_indices = members_idx
    else:
        norms = np.linalg.norm(centroids, axis=1)
        if np.any(norms < 1e-6):
            raise DegenerateInputError(f"{ts.image_id}: zero-norm cluster centroid")
        vectors = (centroids / norms[:, None]).astype(np.float32)
        seed_indices = init
    return InstanceTokenSet(
        image_id=ts.image_id,
        vectors=vectors,
        seed_indices=seed_indices,
        provenance={"strategy": f"kmeans_{variant}", "k": int(k),
                    "iters": iters, "rng_seed": rng_seed},
    )


def write_instance_store(
    sets: Sequence[InstanceTokenSet],
    path: str | Path,
    provenance_path: str | Path | None = None,
) -> int:
    """Persist instance tokens as a plain token store plus a provenance sidecar."""
    n = write_store([s.to_token_set() for s in sets], path)
    if provenance_path is not None and sets:
        prov = dict(sets[0].provenance)
        prov["images"] = len(sets)
        prov["total_sim_evals"] = int(
            sum(s.provenance.get("sim_evals", 0) for s in sets)
        )
        with open(provenance_path, "w", encoding="utf-8") as fh:
            json.dump(prov, fh, indent=2, sort_keys=True)
            fh.write("\n")
    return n
