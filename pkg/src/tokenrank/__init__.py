"""Training-free multi-vector image retrieval toolkit.

Patch-token stores, instance-token aggregation, late-interaction scoring,
two-stage shortlist-then-rerank search, quantized storage, and the matching
evaluation harness.
"""

from tokenrank.aggregation import (
    InstanceTokenSet,
    SeedSelection,
    aggregate,
    assign_tokens,
    build_instance_tokens,
    kmeans_per_image,
    select_seeds,
)
from tokenrank.codebooks import Codebook, PcaModel, fit_pca, train_codebook, vlad_encode
from tokenrank.engine import (
    FlatIndex,
    MultiVectorStore,
    RunRanking,
    build_flat_index,
    build_multivector_store,
    exhaustive_search,
    late_interaction_score,
    quantize_store,
    search_flat,
    stage1_search,
    two_stage_search,
)
from tokenrank.evaluation import (
    MetricsReport,
    average_precision,
    emit_report,
    mean_average_precision,
    recall_at_k,
    shortlist_hit_rate,
    shortlist_recall,
)
from tokenrank.pooling import GlobalDescriptor, pool
from tokenrank.store import (
    RelevanceManifest,
    TokenSet,
    load_manifest,
    load_store,
    read_store,
    write_store,
)
from tokenrank.synth import SynthSpec, generate_benchmark

__version__ = "0.1.0"

__all__ = [
    "TokenSet",
    "RelevanceManifest",
    "read_store",
    "load_store",
    "write_store",
    "load_manifest",
    "GlobalDescriptor",
    "pool",
    "SeedSelection",
    "InstanceTokenSet",
    "select_seeds",
    "assign_tokens",
    "aggregate",
    "build_instance_tokens",
    "kmeans_per_image",
    "Codebook",
    "PcaModel",
    "train_codebook",
    "vlad_encode",
    "fit_pca",
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
    "MetricsReport",
    "recall_at_k",
    "average_precision",
    "mean_average_precision",
    "shortlist_recall",
    "shortlist_hit_rate",
    "emit_report",
    "SynthSpec",
    "generate_benchmark",
    "__version__",
]
