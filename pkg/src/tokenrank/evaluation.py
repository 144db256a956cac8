"""Retrieval metrics under cluster-tolerant relevance.

Recall@K is the fraction of queries with a relevant image in the top K.
Average precision divides by the full relevant-set size |R(q)|, so items a
truncated run never retrieves count as misses. Shortlist recall R@S is the
mean retrieved fraction of R(q) (the reranking ceiling); the looser
hit-rate variant is reported alongside.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from tokenrank.engine.two_stage import RunRanking
from tokenrank.errors import ProtocolError
from tokenrank.store import RelevanceManifest

DEFAULT_RECALL_KS = (1, 5, 10)


def _relevants(manifest: RelevanceManifest, query_id: str) -> frozenset[str]:
    if query_id not in manifest.queries:
        raise ProtocolError(f"query {query_id!r} absent from manifest")
    rel = manifest.relevant_set(query_id)
    if not rel:
        raise ProtocolError(f"query {query_id!r} has an empty relevant set")
    return rel


def _check_gallery_ids(runs: Sequence[RunRanking], manifest: RelevanceManifest) -> None:
    gallery = manifest.gallery.keys()
    for run in runs:
        foreign = [gid for gid in run.ids() if gid not in gallery]
        if foreign:
            raise ProtocolError(
                f"run {run.query_id!r} retrieves ids outside the manifest gallery "
                f"(e.g. {foreign[0]!r})"
            )


def recall_at_k(runs: Sequence[RunRanking], manifest: RelevanceManifest, k: int) -> float:
    """Fraction of queries with >= 1 relevant image in the top k."""
    if not runs:
        raise ProtocolError("no queries to evaluate")
    hits = 0
    for run in runs:
        rel = _relevants(manifest, run.query_id)
        if any(gid in rel for gid in run.ids()[:k]):
            hits += 1
    return hits / len(runs)


def average_precision(run: RunRanking, manifest: RelevanceManifest) -> float:
    """AP with the full |R(q)| divisor; unretrieved relevants contribute 0."""
    rel = _relevants(manifest, run.query_id)
    found = 0
    total = 0.0
    for rank, gid in enumerate(run.ids(), start=1):
        if gid in rel:
            found += 1
            total += found / rank
    return total / len(rel)


def mean_average_precision(runs: Sequence[RunRanking], manifest: RelevanceManifest) -> float:
    if not runs:
        raise ProtocolError("no queries to evaluate")
    return float(np.mean([average_precision(r, manifest) for r in runs]))


def shortlist_recall(
    shortlists: Mapping[str, Sequence[str]],
    manifest: RelevanceManifest,
    s: int,
) -> float:
    """Mean over queries of |R(q) ∩ top-S| / |R(q)| (the reranking ceiling)."""
    if not shortlists:
        raise ProtocolError("no queries to evaluate")
    fractions = []
    for query_id, ids in shortlists.items():
        rel = _relevants(manifest, query_id)
        got = sum(1 for gid in list(ids)[:s] if gid in rel)
        fractions.append(got / len(rel))
    return float(np.mean(fractions))


def shortlist_hit_rate(
    shortlists: Mapping[str, Sequence[str]],
    manifest: RelevanceManifest,
    s: int,
) -> float:
    """Fraction of queries whose top-S contains at least one relevant image."""
    if not shortlists:
        raise ProtocolError("no queries to evaluate")
    hits = sum(
        1
        for query_id, ids in shortlists.items()
        if any(gid in _relevants(manifest, query_id) for gid in list(ids)[:s])
    )
    return hits / len(shortlists)


@dataclass
class MetricsReport:
    recall_at: dict[int, float]
    map: float
    per_query_ap: dict[str, float]
    config: dict = field(default_factory=dict)
    shortlist_recall: dict[int, float] = field(default_factory=dict)
    shortlist_hit_rate: dict[int, float] = field(default_factory=dict)

    def to_json(self) -> str:
        doc = {
            "recall_at": {str(k): v for k, v in sorted(self.recall_at.items())},
            "map": self.map,
            "shortlist_recall": {str(s): v for s, v in sorted(self.shortlist_recall.items())},
            "shortlist_hit_rate": {str(s): v for s, v in sorted(self.shortlist_hit_rate.items())},
            "per_query_ap": {q: self.per_query_ap[q] for q in sorted(self.per_query_ap)},
            "config": self.config,
        }
        return json.dumps(doc, indent=2, sort_keys=False) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "MetricsReport":
        doc = json.loads(text)
        return cls(
            recall_at={int(k): v for k, v in doc["recall_at"].items()},
            map=doc["map"],
            per_query_ap=doc["per_query_ap"],
            config=doc.get("config", {}),
            shortlist_recall={int(k): v for k, v in doc.get("shortlist_recall", {}).items()},
            shortlist_hit_rate={int(k): v for k, v in doc.get("shortlist_hit_rate", {}).items()},
        )

    def to_table(self) -> str:
        rows = [("metric", "value")]
        for k in sorted(self.recall_at):
            rows.append((f"Recall@{k}", f"{self.recall_at[k]:.4f}"))
        rows.append(("mAP", f"{self.map:.4f}"))
        for s in sorted(self.shortlist_recall):
            rows.append((f"R@{s} (fraction)", f"{self.shortlist_recall[s]:.4f}"))
        for s in sorted(self.shortlist_hit_rate):
            rows.append((f"R@{s} (hit-rate)", f"{self.shortlist_hit_rate[s]:.4f}"))
        width = max(len(r[0]) for r in rows)
        lines = [f"{name:<{width}}  {value}" for name, value in rows]
        sep = "-" * max(len(line) for line in lines)
        return "\n".join([lines[0], sep, *lines[1:]]) + "\n"


def emit_report(
    runs: Sequence[RunRanking],
    manifest: RelevanceManifest,
    config: Mapping | None = None,
    recall_ks: Sequence[int] = DEFAULT_RECALL_KS,
    shortlist_sizes: Sequence[int] = (),
) -> MetricsReport:
    """Aggregate metrics for one run set; deterministic field order."""
    if not runs:
        raise ProtocolError("no queries to evaluate")
    _check_gallery_ids(runs, manifest)
    per_query = {run.query_id: average_precision(run, manifest) for run in runs}
    shortlists = {run.query_id: run.ids() for run in runs}
    report = MetricsReport(
        recall_at={k: recall_at_k(runs, manifest, k) for k in recall_ks},
        map=float(np.mean(list(per_query.values()))),
        per_query_ap=per_query,
        config=dict(config or {}),
        shortlist_recall={s: shortlist_recall(shortlists, manifest, s) for s in shortlist_sizes},
        shortlist_hit_rate={s: shortlist_hit_rate(shortlists, manifest, s) for s in shortlist_sizes},
    )
    return report


def write_report(report: MetricsReport, json_path: str | Path,
                 table_path: str | Path | None = None) -> None:
    Path(json_path).write_text(report.to_json(), encoding="utf-8")
    if table_path is not None:
        Path(table_path).write_text(report.to_table(), encoding="utf-8")
