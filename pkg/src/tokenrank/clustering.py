"""Deterministic Lloyd k-means with k-means++ seeding.

Shared by per-image clustering, codebook training, and PQ sub-codebooks.
All arithmetic is float64 so the SSE sequence is monotone; callers cast the
returned centroids to their working dtype.
"""

from __future__ import annotations

import numpy as np

from tokenrank.errors import ValidationError


def _pairwise_sq_dists(points: np.ndarray, centers: np.ndarray) -> np.ndarray:
    # ||x - c||^2 = ||x||^2 - 2 x.c + ||c||^2
    p2 = np.einsum("ij,ij->i", points, points)[:, None]
    c2 = np.einsum("ij,ij->i", centers, centers)[None, :]
    d2 = p2 - 2.0 * (points @ centers.T) + c2
    np.maximum(d2, 0.0, out=d2)
    return d2


def kmeans_pp_init(points: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    """k-means++ seeding; returns k row indices into *points*."""
    n = points.shape[0]
    if k > n:
        raise ValidationError(f"k={k} exceeds sample size {n}")
    chosen = np.empty(k, dtype=np.int64)
    chosen[0] = int(rng.integers(n))
    d2 = _pairwise_sq_dists(points, points[chosen[0]][None, :])[:, 0]
    for t in range(1, k):
        total = float(d2.sum())
        if total <= 0.0:
            # all remaining mass on already-covered points: pick uniformly
            # among indices not yet chosen
            remaining = np.setdiff1d(np.arange(n), chosen[:t])
            chosen[t] = int(rng.choice(remaining))
        else:
            chosen[t] = int(rng.choice(n, p=d2 / total))
        step = _pairwise_sq_dists(points, points[chosen[t]][None, :])[:, 0]
        np.minimum(d2, step, out=d2)
    return chosen


def lloyd(
    points: np.ndarray,
    centroids: np.ndarray,
    iters: int,
) -> tuple[np.ndarray, np.ndarray, list[float]]:
    """Run at most *iters* Lloyd iterations from the given centroids.

    Empty clusters are repaired by stealing the point currently farthest from
    its own centroid (among clusters that can spare one). Stops early when the
    assignment no longer changes. Returns (centroids, labels, sse_history).
    """
    points = np.ascontiguousarray(points, dtype=np.float64)
    centroids = np.array(centroids, dtype=np.float64, copy=True)
    k = centroids.shape[0]
    labels = np.full(points.shape[0], -1, dtype=np.int64)
    history: list[float] = []
    for _ in range(iters):
        d2 = _pairwise_sq_dists(points, centroids)
        new_labels = np.argmin(d2, axis=1)
        counts = np.bincount(new_labels, minlength=k)
        for empty in np.flatnonzero(counts == 0):
            # steal the point farthest from its own centroid, from a cluster
            # that can spare one; recompute per-empty so two repairs never
            # grab the same point
            own = d2[np.arange(points.shape[0]), new_labels].copy()
            own[counts[new_labels] <= 1] = -np.inf
            thief = int(np.argmax(own))
            counts[new_labels[thief]] -= 1
            new_labels[thief] = empty
            counts[empty] = 1
            centroids[empty] = points[thief]
            d2[:, empty] = _pairwise_sq_dists(points, points[thief][None, :])[:, 0]
        if np.array_equal(new_labels, labels):
            break
        labels = new_labels
        for j in range(k):
            members = points[labels == j]
            if members.shape[0]:
                centroids[j] = members.mean(axis=0)
        sse = float(
            np.sum((points - centroids[labels]) ** 2)
        )
        history.append(sse)
    return centroids, labels, history


def kmeans(
    points: np.ndarray,
    k: int,
    iters: int,
    rng: np.random.Generator,
) -> tuple[np.ndarray, np.ndarray, list[float]]:
    """k-means++ init followed by Lloyd; deterministic given *rng* state."""
    points = np.ascontiguousarray(points, dtype=np.float64)
    init = kmeans_pp_init(points, k, rng)
    return lloyd(points, points[init], iters)
