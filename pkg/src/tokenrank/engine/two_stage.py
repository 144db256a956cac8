"""Two-stage retrieval: flat shortlist, then late-interaction reranking."""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from tokenrank.engine.flat_index import FlatIndex, search_flat, top_s_rows
from tokenrank.engine.quantize import MultiVectorStore
from tokenrank.engine.scoring import maxsim_many
from tokenrank.errors import ValidationError
from tokenrank.pooling import GlobalDescriptor

STAGE_SV = "sv"
STAGE_LI = "li"


@dataclass(eq=False)
class RunRanking:
    """Ordered results for one query: (rank, image_id, score, stage) rows."""

    query_id: str
    entries: list[tuple[int, str, float, str]]
    shortlist_size: int
    stage1_ms: float = 0.0
    stage2_ms: float = 0.0

    def ids(self) -> list[str]:
        return [e[1] for e in self.entries]


def _check_aligned(index: FlatIndex, store: MultiVectorStore) -> None:
    if index.ids_key() != store.ids_key() or index.image_ids != store.image_ids:
        raise ValidationError("index and token store cover different image id sets")


def two_stage_search(
    index: FlatIndex,
    store: MultiVectorStore,
    query_desc: GlobalDescriptor,
    query_tokens: np.ndarray,
    s: int,
) -> RunRanking:
    """Shortlist s candidates by inner product, rescore them all with MaxSim.

    Final order: LI score desc, Stage-1 score desc, image id asc. Only
    shortlist members are returned.
    """
    _check_aligned(index, store)
    t0 = time.perf_counter()
    if len(index) == 0:
        raise ValidationError("empty index")
    if query_desc.vector.shape[0] != index.dim:
        raise ValidationError("query descriptor dim mismatch")
    sv_scores = index.matrix @ query_desc.vector
    rows = top_s_rows(sv_scores, s)
    t1 = time.perf_counter()
    flat, offsets = store.decode_rows(rows)
    li = maxsim_many(query_tokens, flat, offsets)
    # rows arrive sv-desc/id-asc; lexsort is stable with the last key primary,
    # so this yields li desc, then sv desc, then ascending id
    order = np.lexsort((-sv_scores[rows], -li))
    t2 = time.perf_counter()
    entries = [
        (r + 1, index.image_ids[rows[i]], float(li[i]), STAGE_LI)
        for r, i in enumerate(order)
    ]
    return RunRanking(
        query_id=query_desc.image_id,
        entries=entries,
        shortlist_size=int(rows.shape[0]),
        stage1_ms=(t1 - t0) * 1e3,
        stage2_ms=(t2 - t1) * 1e3,
    )


def stage1_search(index: FlatIndex, query_desc: GlobalDescriptor, s: int) -> RunRanking:
    """Stage-1-only run (single-vector scores, stage tag 'sv')."""
    t0 = time.perf_counter()
    hits = search_flat(index, query_desc, s)
    t1 = time.perf_counter()
    entries = [(r + 1, gid, score, STAGE_SV) for r, (gid, score) in enumerate(hits)]
    return RunRanking(
        query_id=query_desc.image_id,
        entries=entries,
        shortlist_size=len(entries),
        stage1_ms=(t1 - t0) * 1e3,
    )


def exhaustive_search(
    store: MultiVectorStore,
    query_id: str,
    query_tokens: np.ndarray,
    flat_cache: tuple[np.ndarray, np.ndarray] | None = None,
    top_n: int | None = None,
) -> RunRanking:
    """Late interaction against every gallery image (the Full-LI reference).

    Pass ``flat_cache = store.decode_all()`` when scoring many queries so the
    store is decoded once. ``top_n`` caps how many rows the run materializes;
    every gallery image is still scored.
    """
    t0 = time.perf_counter()
    flat, offsets = flat_cache if flat_cache is not None else store.decode_all()
    li = maxsim_many(query_tokens, flat, offsets)
    order = top_s_rows(li, len(store.image_ids) if top_n is None else top_n)
    t1 = time.perf_counter()
    entries = [
        (r + 1, store.image_ids[i], float(li[i]), STAGE_LI)
        for r, i in enumerate(order)
    ]
    return RunRanking(
        query_id=query_id,
        entries=entries,
        shortlist_size=len(store.image_ids),
        stage2_ms=(t1 - t0) * 1e3,
    )


# --- run files -----------------------------------------------------------

def _fmt_score(score: float) -> str:
    return np.format_float_positional(np.float32(score), unique=True, trim="0")


def write_runs(runs: Sequence[RunRanking], path: str | Path) -> None:
    """TSV rows: query_id, rank, image_id, score, stage."""
    with open(path, "w", encoding="utf-8") as fh:
        for run in runs:
            for rank, image_id, score, stage in run.entries:
                fh.write(f"{run.query_id}\t{rank}\t{image_id}\t{_fmt_score(score)}\t{stage}\n")


def read_runs(path: str | Path) -> list[RunRanking]:
    """Parse a run TSV back into per-query rankings (file order preserved)."""
    by_query: dict[str, RunRanking] = {}
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != 5:
                raise ValidationError(f"{path}: line {lineno}: expected 5 columns")
            qid, rank, image_id, score, stage = parts
            run = by_query.get(qid)
            if run is None:
                run = by_query[qid] = RunRanking(query_id=qid, entries=[], shortlist_size=0)
            run.entries.append((int(rank), image_id, float(np.float32(score)), stage))
    for run in by_query.values():
        ranks = [e[0] for e in run.entries]
        if ranks != list(range(1, len(ranks) + 1)):
            raise ValidationError(f"{path}: {run.query_id}: ranks are not contiguous")
        run.shortlist_size = len(run.entries)
    return list(by_query.values())


def timing_summary(runs: Sequence[RunRanking], s: int, k: int) -> dict:
    stage1 = float(np.mean([r.stage1_ms for r in runs])) if runs else 0.0
    stage2 = float(np.mean([r.stage2_ms for r in runs])) if runs else 0.0
    return {
        "stage1_ms_mean": stage1,
        "stage2_ms_mean": stage2,
        "total_ms_mean": stage1 + stage2,
        "S": s,
        "K": k,
    }


def write_timing(summary: dict, path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True)
        fh.write("\n")
