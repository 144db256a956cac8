"""Metric definitions against brute-force oracles."""

from __future__ import annotations

import numpy as np
import pytest

from tokenrank.engine.two_stage import RunRanking
from tokenrank.errors import ProtocolError
from tokenrank.evaluation import (
    MetricsReport,
    average_precision,
    emit_report,
    mean_average_precision,
    recall_at_k,
    shortlist_hit_rate,
    shortlist_recall,
)
from tokenrank.store import ManifestEntry, RelevanceManifest


def manifest_from(queries, gallery):
    """queries: {qid: set(ids)}, gallery: {gid: crater_id}."""
    entries = [
        ManifestEntry(qid, "query", frozenset(ids)) for qid, ids in queries.items()
    ] + [
        ManifestEntry(gid, "gallery", frozenset({cid})) for gid, cid in gallery.items()
    ]
    return RelevanceManifest(entries)


def run_of(qid, ids, stage="li"):
    entries = [(r + 1, gid, 1.0 - r * 0.01, stage) for r, gid in enumerate(ids)]
    return RunRanking(query_id=qid, entries=entries, shortlist_size=len(ids))


def oracle_ap(ranked_ids, relevant):
    """Independent AP: nested loops, |R(q)| divisor, truncation as misses."""
    precisions = []
    hits = 0
    for rank, gid in enumerate(ranked_ids, start=1):
        if gid in relevant:
            hits += 1
            retrieved_so_far = ranked_ids[:rank]
            rel_in_prefix = sum(1 for x in retrieved_so_far if x in relevant)
            precisions.append(rel_in_prefix / rank)
    return sum(precisions) / len(relevant)


class TestWorkedExamples:
    def setup_method(self):
        self.manifest = manifest_from(
            {"q": {"C1"}},
            {"g1": "C1", "g2": "C1", "g3": "C2", "g4": "C3", "g5": "C4"},
        )

    def test_both_relevant_on_top_gives_one(self):
        run = run_of("q", ["g1", "g2", "g3", "g4"])
        assert average_precision(run, self.manifest) == pytest.approx(1.0)

    def test_ranks_one_and_three(self):
        run = run_of("q", ["g1", "g3", "g2", "g4"])
        assert average_precision(run, self.manifest) == pytest.approx(
            (1 + 2 / 3) / 2, abs=1e-9
        )
        assert average_precision(run, self.manifest) == pytest.approx(0.8333, abs=1e-4)

    def test_one_of_two_at_rank_two_truncated(self):
        run = run_of("q", ["g3", "g1"])  # g2 never retrieved
        assert average_precision(run, self.manifest) == pytest.approx(0.25, abs=1e-9)

    def test_recall_at_5_hand_count(self):
        manifest = manifest_from(
            {"q1": {"C1"}, "q2": {"C2"}, "q3": {"C3"}},
            {"g1": "C1", "g2": "C2", "g3": "C3",
             "d1": "X1", "d2": "X2", "d3": "X3", "d4": "X4", "d5": "X5", "d6": "X6"},
        )
        runs = [
            run_of("q1", ["g1", "d1", "d2", "d3", "d4", "d5"]),   # hit rank 1
            run_of("q2", ["d1", "d2", "d3", "d4", "d5", "g2"]),   # first hit rank 6
            run_of("q3", ["d1", "g3", "d2", "d3", "d4", "d5"]),   # hit rank 2
        ]
        assert recall_at_k(runs, manifest, 5) == pytest.approx(2 / 3)

    def test_recall_edges(self):
        run_hit = run_of("q", ["g1", "g3"])
        run_miss = run_of("q", ["g3", "g4"])
        assert recall_at_k([run_hit], self.manifest, 1) == 1.0
        assert recall_at_k([run_miss], self.manifest, 2) == 0.0

    def test_shortlist_recall_examples(self):
        manifest = manifest_from(
            {"q1": {"C1"}, "q2": {"C2"}, "q3": {"C3"}},
            {"a1": "C1", "a2": "C1", "b1": "C2", "b2": "C2",
             "c1": "C3", "c2": "C3", "dd": "X"},
        )
        shortlists = {
            "q1": ["a1", "a2", "dd"],   # 2/2
            "q2": ["b1", "dd", "c1"],   # 1/2
            "q3": ["dd", "a1", "b1"],   # 0/2
        }
        assert shortlist_recall(shortlists, manifest, 3) == pytest.approx(0.5)
        assert shortlist_hit_rate(shortlists, manifest, 3) == pytest.approx(2 / 3)

    def test_full_gallery_shortlist_is_perfect(self):
        shortlists = {"q": ["g1", "g2", "g3", "g4", "g5"]}
        assert shortlist_recall(shortlists, self.manifest, 5) == 1.0

    def test_query_absent_from_manifest(self):
        with pytest.raises(ProtocolError, match="absent"):
            recall_at_k([run_of("nope", ["g1"])], self.manifest, 1)


class TestOracleEquivalence:
    def test_randomized_against_brute_force(self):
        rng = np.random.default_rng(77)
        for trial in range(200):
            n_craters = int(rng.integers(3, 10))
            craters = [f"C{i}" for i in range(n_craters)]
            gallery = {}
            for i, cid in enumerate(craters):
                for v in range(2):
                    gallery[f"g{i}_{v}"] = cid
            for i in range(int(rng.integers(0, 8))):
                gallery[f"dist{i}"] = f"X{i}"
            queries = {}
            n_queries = int(rng.integers(1, 6))
            for i in range(n_queries):
                size = int(rng.integers(1, 4))
                ids = rng.choice(craters, size=size, replace=False)
                queries[f"q{i}"] = set(ids.tolist())
            manifest = manifest_from(queries, gallery)
            gallery_ids = sorted(gallery)
            runs = []
            for qid in queries:
                depth = int(rng.integers(1, len(gallery_ids) + 1))
                order = rng.permutation(gallery_ids)[:depth].tolist()
                runs.append(run_of(qid, order))
            # oracle values
            want_aps = {}
            for run in runs:
                rel = {g for g, cid in gallery.items() if cid in queries[run.query_id]}
                want_aps[run.query_id] = oracle_ap(run.ids(), rel)
            got_map = mean_average_precision(runs, manifest)
            assert got_map == pytest.approx(np.mean(list(want_aps.values())), abs=1e-9)
            for k in (1, 3, 5):
                want = np.mean([
                    1.0 if any(
                        g in {x for x, cid in gallery.items() if cid in queries[r.query_id]}
                        for g in r.ids()[:k]
                    ) else 0.0
                    for r in runs
                ])
                assert recall_at_k(runs, manifest, k) == pytest.approx(want, abs=1e-9)
            shortlists = {r.query_id: r.ids() for r in runs}
            for s in (2, 4):
                want = np.mean([
                    sum(1 for g in r.ids()[:s]
                        if gallery.get(g) in queries[r.query_id]) /
                    len({g for g, cid in gallery.items() if cid in queries[r.query_id]})
                    for r in runs
                ])
                assert shortlist_recall(shortlists, manifest, s) == pytest.approx(want, abs=1e-9)


class TestMetricProperties:
    def setup_method(self):
        self.manifest = manifest_from(
            {"q1": {"C1"}, "q2": {"C2"}},
            {"g1": "C1", "g2": "C1", "g3": "C2", "g4": "C2", "g5": "X"},
        )
        self.runs = [
            run_of("q1", ["g3", "g1", "g5", "g2"]),
            run_of("q2", ["g4", "g5", "g1", "g3"]),
        ]

    def test_recall_non_decreasing_in_k(self):
        values = [recall_at_k(self.runs, self.manifest, k) for k in range(1, 5)]
        assert all(b >= a for a, b in zip(values, values[1:]))

    def test_ap_in_unit_interval(self):
        for run in self.runs:
            assert 0.0 <= average_precision(run, self.manifest) <= 1.0

    def test_map_invariant_to_query_order(self):
        a = mean_average_precision(self.runs, self.manifest)
        b = mean_average_precision(list(reversed(self.runs)), self.manifest)
        assert a == pytest.approx(b, abs=1e-12)

    def test_single_id_reduces_to_exact_match(self):
        # |I(q)|=1: relevance is id equality on the crater label
        rel = self.manifest.relevant_set("q1")
        assert rel == {"g1", "g2"}


class TestEmitReport:
    def setup_method(self):
        self.manifest = manifest_from(
            {"q1": {"C1"}},
            {"g1": "C1", "g2": "C1", "g3": "X"},
        )

    def test_empty_query_set_rejected(self):
        with pytest.raises(ProtocolError):
            emit_report([], self.manifest)

    def test_single_query_map_equals_ap(self):
        runs = [run_of("q1", ["g1", "g3", "g2"])]
        report = emit_report(runs, self.manifest)
        assert report.map == pytest.approx(report.per_query_ap["q1"])

    def test_json_round_trip(self):
        runs = [run_of("q1", ["g1", "g3", "g2"])]
        report = emit_report(runs, self.manifest, config={"pool": "mean", "K": 16},
                             shortlist_sizes=(2,))
        back = MetricsReport.from_json(report.to_json())
        assert back.recall_at == report.recall_at
        assert back.map == pytest.approx(report.map)
        assert back.per_query_ap == report.per_query_ap
        assert back.shortlist_recall == report.shortlist_recall
        assert back.config == report.config

    def test_foreign_gallery_ids_rejected(self):
        runs = [run_of("q1", ["g1", "zz"])]
        with pytest.raises(ProtocolError, match="outside"):
            emit_report(runs, self.manifest)

    def test_table_renders(self):
        runs = [run_of("q1", ["g1", "g3", "g2"])]
        report = emit_report(runs, self.manifest, shortlist_sizes=(2,))
        table = report.to_table()
        assert "Recall@1" in table and "mAP" in table and "R@2" in table
