"""Synthetic benchmark generator for CI-scale end-to-end runs.

Every image mixes two populations of unit tokens:

* foreground: a per-identity cluster. Each foreground token sits at a fixed
  angle from the identity's axis, so views of one identity share token-level
  structure (token matching is strong) and their mean carries a moderate
  identity signal (single-vector search works, but far from perfectly).
* background: perturbations of a handful of archetype directions shared by
  the whole dataset. Background dominates the per-image mean, which is what
  caps single-vector accuracy, and its tight clusters keep farthest-point
  seeding pointed at the spread-out foreground.

Views perturb each token by a random angle with mean ``sigma_deg``.
Attention concentrates on foreground and raw norms run higher there, so
attention/norm seeding strategies have signal. CLS is a noisy copy of the
identity axis. Gallery images get ``gallery_views`` views per identity plus
single-view distractors with unique identities; queries get ``query_views``
views each. Everything derives from ``seed``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from tokenrank.errors import ValidationError
from tokenrank.store import ManifestEntry, RelevanceManifest, TokenSet


@dataclass(frozen=True)
class SynthSpec:
    identities: int
    gallery_views: int = 2
    query_views: int = 5
    sigma_deg: float = 15.0
    distractors: int = 0
    n_tokens: int = 48
    dim: int = 24
    seed: int = 0
    fg_tokens: int = 12
    fg_axis_deg: float = 45.0
    bg_archetypes: int = 8
    bg_spread_deg: float = 25.0

    def validate(self) -> None:
        if self.identities < 0 or self.distractors < 0:
            raise ValidationError("identity and distractor counts must be >= 0")
        if self.identities == 0 and self.distractors == 0:
            raise ValidationError("nothing to generate")
        if self.identities > 0 and self.gallery_views < 1:
            raise ValidationError("need at least one gallery view per identity")
        if self.query_views < 0:
            raise ValidationError("query view count must be >= 0")
        if not 0 < self.fg_tokens <= self.n_tokens:
            raise ValidationError("fg_tokens must lie in [1, n_tokens]")
        if self.dim < 3:
            raise ValidationError("dim must be >= 3")
        if self.sigma_deg < 0:
            raise ValidationError("sigma_deg must be >= 0")
        if self.bg_archetypes < 1:
            raise ValidationError("need at least one background archetype")


def _unit(rows: np.ndarray) -> np.ndarray:
    return rows / np.linalg.norm(rows, axis=-1, keepdims=True)


def _perturb(base: np.ndarray, rng: np.random.Generator, sigma_deg: float) -> np.ndarray:
    """Rotate each unit row by a half-normal random angle (mean sigma_deg)
    toward a random direction orthogonal to it."""
    if sigma_deg == 0:
        return base.copy()
    n, d = base.shape
    angles = np.abs(rng.normal(0.0, sigma_deg * np.sqrt(np.pi / 2.0), size=n))
    angles = np.deg2rad(angles)
    noise = rng.standard_normal((n, d))
    noise -= np.einsum("ij,ij->i", noise, base)[:, None] * base
    norms = np.linalg.norm(noise, axis=1, keepdims=True)
    norms[norms < 1e-12] = 1.0
    noise /= norms
    return _unit(base * np.cos(angles)[:, None] + noise * np.sin(angles)[:, None])


def generate_benchmark(spec: SynthSpec) -> tuple[list[TokenSet], RelevanceManifest]:
    """Build token sets plus the matching manifest; fully seeded."""
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    dim = spec.dim
    n_fg, n_bg = spec.fg_tokens, spec.n_tokens - spec.fg_tokens
    archetypes = _unit(rng.standard_normal((spec.bg_archetypes, dim)))
    axes = _unit(rng.standard_normal((spec.identities + spec.distractors, dim)))
    phi = np.deg2rad(spec.fg_axis_deg)

    def make_image(image_id: str, axis: np.ndarray, view_rng: np.random.Generator) -> TokenSet:
        u = view_rng.standard_normal((n_fg, dim))
        u -= np.einsum("ij,j->i", u, axis)[:, None] * axis
        u = _unit(u)
        fg = _perturb(_unit(axis * np.cos(phi) + u * np.sin(phi)), view_rng, spec.sigma_deg)
        parts = [fg]
        if n_bg:
            picks = view_rng.integers(0, spec.bg_archetypes, n_bg)
            parts.append(_perturb(archetypes[picks], view_rng, spec.bg_spread_deg))
        directions = np.concatenate(parts, axis=0)
        norms = np.concatenate([
            view_rng.uniform(1.3, 2.0, n_fg),
            view_rng.uniform(0.6, 1.2, n_bg),
        ])
        attention = np.concatenate([
            view_rng.uniform(0.5, 1.0, n_fg),
            view_rng.uniform(0.0, 0.08, n_bg),
        ])
        cls_dir = axis + 0.05 * view_rng.standard_normal(dim)
        return TokenSet.from_matrix(
            image_id,
            (directions * norms[:, None]).astype(np.float32),
            attention=attention.astype(np.float32),
            cls_vector=(cls_dir / np.linalg.norm(cls_dir)).astype(np.float32),
        )

    records: list[TokenSet] = []
    entries: list[ManifestEntry] = []
    image_index = 0
    for ident in range(spec.identities):
        crater = f"C{ident:05d}"
        for view in range(spec.gallery_views):
            image_id = f"g_{crater}_{view}"
            records.append(make_image(image_id, axes[ident],
                                      np.random.default_rng([spec.seed, 1, image_index])))
            entries.append(ManifestEntry(image_id, "gallery", frozenset({crater}),
                                         context=f"{view + 2}x"))
            image_index += 1
        for view in range(spec.query_views):
            image_id = f"q_{crater}_{view}"
            records.append(make_image(image_id, axes[ident],
                                      np.random.default_rng([spec.seed, 2, image_index])))
            entries.append(ManifestEntry(image_id, "query", frozenset({crater}),
                                         view=f"v{view}"))
            image_index += 1
    for dist in range(spec.distractors):
        crater = f"D{dist:05d}"
        image_id = f"g_{crater}_0"
        records.append(make_image(image_id, axes[spec.identities + dist],
                                  np.random.default_rng([spec.seed, 3, dist])))
        entries.append(ManifestEntry(image_id, "gallery", frozenset({crater})))

    return records, RelevanceManifest(entries)
