from tokenrank.engine.scoring import late_interaction_score
from tokenrank.engine.flat_index import FlatIndex, build_flat_index, search_flat
from tokenrank.engine.quantize import MultiVectorStore, build_multivector_store, quantize_store
from tokenrank.engine.two_stage import (
    RunRanking,
    exhaustive_search,
    read_runs,
    stage1_search,
    two_stage_search,
    write_runs,
)

__all__ = [
    "late_interaction_score",
    "FlatIndex",
    "build_flat_index",
    "search_flat",
    "MultiVectorStore",
    "build_multivector_store",
    "quantize_store",
    "RunRanking",
    "two_stage_search",
    "stage1_search",
    "exhaustive_search",
    "write_runs",
    "read_runs",
]
