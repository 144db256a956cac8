"""Global-dictionary aggregation baselines: codebook training, VLAD encoding,
and PCA whitening for the single-vector VLAD route."""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from tokenrank.aggregation import InstanceTokenSet
from tokenrank.clustering import kmeans
from tokenrank.container import read_container, write_container
from tokenrank.errors import (
    DegenerateDescriptorWarning,
    DegenerateInputError,
    ValidationError,
)
from tokenrank.pooling import GlobalDescriptor
from tokenrank.store import TokenSet

DEFAULT_SAMPLE_BUDGET = 500_000


@dataclass(eq=False)
class Codebook:
    centroids: np.ndarray  # (K, D) f32
    meta: dict = field(default_factory=dict)

    @property
    def k(self) -> int:
        return int(self.centroids.shape[0])

    @property
    def dim(self) -> int:
        return int(self.centroids.shape[1])

    def save(self, path: str | Path) -> None:
        write_container(path, {"kind": "codebook", "meta": self.meta},
                        {"centroids": self.centroids})

    @classmethod
    def load(cls, path: str | Path) -> "Codebook":
        header, arrays = read_container(path)
        if header.get("kind") != "codebook":
            raise ValidationError(f"{path}: not a codebook file")
        return cls(centroids=arrays["centroids"], meta=header.get("meta", {}))


@dataclass(eq=False)
class PcaModel:
    """Whitening projection fit on gallery descriptors only."""

    mean: np.ndarray          # (Din,)
    projection: np.ndarray    # (Din, Dout), columns = eigvec / sqrt(eig + floor)
    eigenvalues: np.ndarray   # (Dout,), floored at 0
    floor: float = 1e-8

    @property
    def out_dim(self) -> int:
        return int(self.projection.shape[1])

    def transform(self, x: np.ndarray) -> np.ndarray:
        return (np.asarray(x, dtype=np.float64) - self.mean) @ self.projection

    def inverse_transform(self, y: np.ndarray) -> np.ndarray:
        # projection = V / sqrt(e + floor) with V orthonormal, so
        # x = (y * sqrt(e + floor)) @ V.T + mean
        scales = np.sqrt(self.eigenvalues + self.floor)
        basis = self.projection * scales  # recover V
        return (np.asarray(y, dtype=np.float64) * scales) @ basis.T + self.mean

    def save(self, path: str | Path) -> None:
        write_container(
            path,
            {"kind": "pca", "floor": self.floor},
            {"mean": self.mean.astype(np.float32),
             "projection": self.projection.astype(np.float32),
             "eigenvalues": self.eigenvalues.astype(np.float32)},
        )

    @classmethod
    def load(cls, path: str | Path) -> "PcaModel":
        header, arrays = read_container(path)
        if header.get("kind") != "pca":
            raise ValidationError(f"{path}: not a PCA file")
        return cls(
            mean=arrays["mean"].astype(np.float64),
            projection=arrays["projection"].astype(np.float64),
            eigenvalues=arrays["eigenvalues"].astype(np.float64),
            floor=float(header.get("floor", 1e-8)),
        )


def sample_tokens(
    records: Iterable[TokenSet],
    budget: int = DEFAULT_SAMPLE_BUDGET,
    rng_seed: int = 0,
) -> np.ndarray:
    """Uniform seeded reservoir-free sample: concatenate then thin to budget."""
    mats = [ts.tokens for ts in records]
    if not mats:
        raise ValidationError("no records to sample tokens from")
    all_tokens = np.concatenate(mats, axis=0)
    if all_tokens.shape[0] <= budget:
        return all_tokens
    rng = np.random.default_rng(rng_seed)
    pick = rng.choice(all_tokens.shape[0], size=budget, replace=False)
    pick.sort()
    return all_tokens[pick]


def train_codebook(
    token_sample: np.ndarray,
    k: int,
    iters: int = 25,
    rng_seed: int = 0,
) -> Codebook:
    """Seeded k-means++ / Lloyd over a token sample."""
    sample = np.ascontiguousarray(token_sample, dtype=np.float64)
    if sample.shape[0] < k:
        raise ValidationError(
            f"sample of {sample.shape[0]} tokens is smaller than K={k}"
        )
    rng = np.random.default_rng(rng_seed)
    centroids, _, _ = kmeans(sample, k, iters, rng)
    return Codebook(
        centroids=centroids.astype(np.float32),
        meta={"sample_size": int(sample.shape[0]), "rng_seed": int(rng_seed),
              "iterations": int(iters)},
    )


def vlad_encode(
    ts: TokenSet,
    cb: Codebook,
    mode: str = "sv",
    soft_alpha: float | None = None,
    pca: PcaModel | None = None,
):
    """Accumulate per-cluster residuals against the codebook.

    mv returns the K intra-normalized residuals as a multi-vector set; sv
    concatenates them, L2-normalizes, projects through the PCA whitening
    model, and L2-normalizes again. raw is the sv intermediate before PCA
    (used to fit the whitening model on gallery images).
    """
    if mode not in ("sv", "mv", "raw"):
        raise ValidationError(f"unknown VLAD mode {mode!r}")
    if ts.dim != cb.dim:
        raise ValidationError(
            f"{ts.image_id}: token dim {ts.dim} != codebook dim {cb.dim}"
        )
    tokens = ts.tokens.astype(np.float64)
    centroids = cb.centroids.astype(np.float64)
    cnorm = np.linalg.norm(centroids, axis=1)
    cnorm[cnorm < 1e-12] = 1.0
    cosines = tokens @ (centroids / cnorm[:, None]).T  # tokens are unit norm
    residuals = np.zeros((cb.k, ts.dim), dtype=np.float64)
    if soft_alpha is None:
        nearest = np.argmax(cosines, axis=1)
        for j, c in enumerate(nearest):
            residuals[c] += tokens[j] - centroids[c]
    else:
        logits = soft_alpha * cosines
        logits -= logits.max(axis=1, keepdims=True)
        w = np.exp(logits)
        w /= w.sum(axis=1, keepdims=True)
        residuals = w.T @ tokens - (w.sum(axis=0)[:, None] * centroids)
    norms = np.linalg.norm(residuals, axis=1)
    zero_rows = norms < 1e-12
    safe = np.where(zero_rows, 1.0, norms)
    blocks = residuals / safe[:, None]
    blocks[zero_rows] = 0.0

    if mode == "mv":
        if np.any(zero_rows):
            warnings.warn(
                f"{ts.image_id}: {int(zero_rows.sum())} zero-residual VLAD "
                "blocks replaced by centroid placeholders",
                DegenerateDescriptorWarning,
            )
            placeholders = centroids / np.where(cnorm < 1e-12, 1.0, cnorm)[:, None]
            blocks[zero_rows] = placeholders[zero_rows]
        return InstanceTokenSet(
            image_id=ts.image_id,
            vectors=blocks.astype(np.float32),
            seed_indices=np.arange(cb.k, dtype=np.int64),
            provenance={"strategy": "vlad_mv", "k": cb.k,
                        "soft_alpha": soft_alpha},
        )

    flat = blocks.reshape(-1)
    norm = float(np.linalg.norm(flat))
    if norm < 1e-12:
        raise DegenerateInputError(f"{ts.image_id}: all-zero VLAD descriptor")
    flat = flat / norm
    if mode == "raw":
        return flat
    if pca is None:
        raise ValidationError("sv mode requires a fitted PcaModel")
    projected = pca.transform(flat[None, :])[0]
    pnorm = float(np.linalg.norm(projected))
    if pnorm < 1e-12:
        raise DegenerateInputError(f"{ts.image_id}: VLAD descriptor vanished under PCA")
    return GlobalDescriptor(
        image_id=ts.image_id,
        vector=(projected / pnorm).astype(np.float32),
        method="vlad",
    )


def fit_pca(descriptors: np.ndarray, out_dim: int = 384, floor: float = 1e-8) -> PcaModel:
    """Mean-centered eigendecomposition with whitening by 1/sqrt(eig + floor).

    Eigenvector signs are fixed by making each column's largest-magnitude
    component positive, so the fit is deterministic.
    """
    x = np.asarray(descriptors, dtype=np.float64)
    if x.ndim != 2:
        raise ValidationError("descriptor matrix must be 2-D")
    n, din = x.shape
    if out_dim > din:
        raise ValidationError(f"out_dim {out_dim} exceeds input dim {din}")
    if n < out_dim:
        raise ValidationError(f"need at least {out_dim} samples, got {n}")
    mean = x.mean(axis=0)
    xc = x - mean
    cov = (xc.T @ xc) / (n - 1) if n > 1 else np.zeros((din, din))
    eigvals, eigvecs = np.linalg.eigh(cov)
    order = np.argsort(eigvals)[::-1][:out_dim]
    eigvals = np.maximum(eigvals[order], 0.0)
    eigvecs = eigvecs[:, order]
    flip = eigvecs[np.argmax(np.abs(eigvecs), axis=0), np.arange(out_dim)] < 0
    eigvecs[:, flip] *= -1.0
    projection = eigvecs / np.sqrt(eigvals + floor)
    return PcaModel(mean=mean, projection=projection, eigenvalues=eigvals, floor=floor)
