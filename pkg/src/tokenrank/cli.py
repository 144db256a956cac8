"""Command-line pipeline: synth / aggregate / pool / codebook / index /
search / quantize / eval.

Every command writes a ``config.lock`` JSON with its effective parameters
into the output directory; ``--from-lock`` re-runs a command from such a
file and reproduces the outputs byte-for-byte (timing sidecars excepted,
they record wall-clock). Exit codes: 0 success, 2 validation error, 3 data
corruption.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from tokenrank.aggregation import (
    ASSIGN_MODES,
    SEED_STRATEGIES,
    build_instance_tokens,
    kmeans_per_image,
    write_instance_store,
)
from tokenrank.codebooks import (
    fit_pca,
    sample_tokens,
    train_codebook,
    vlad_encode,
)
from tokenrank.engine.flat_index import FlatIndex, build_flat_index
from tokenrank.engine.quantize import (
    MultiVectorStore,
    build_multivector_store,
    parse_codec,
    quantize_store,
)
from tokenrank.engine.two_stage import (
    exhaustive_search,
    stage1_search,
    timing_summary,
    two_stage_search,
    write_runs,
    write_timing,
)
from tokenrank.errors import CorruptionError, TokenRankError, ValidationError
from tokenrank.evaluation import emit_report, write_report
from tokenrank.pooling import POOL_METHODS, pool, read_descriptors, write_descriptors
from tokenrank.store import (
    MAGIC,
    load_manifest,
    load_store,
    write_store,
)
from tokenrank.engine.two_stage import read_runs
from tokenrank.synth import SynthSpec, generate_benchmark


def resolve_threads(value: int | None) -> int:
    if value is not None and value > 0:
        return value
    env = os.environ.get("TOKENRANK_THREADS", "")
    if env.strip().isdigit() and int(env) > 0:
        return int(env)
    return os.cpu_count() or 1


def parallel_map(fn, items, threads: int) -> list:
    """Order-preserving map over a thread pool; per-item work is pure, so
    results do not depend on the worker count."""
    items = list(items)
    if threads <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=threads) as pool_:
        return list(pool_.map(fn, items))


def write_lock(out_dir: Path, command: str, params: dict) -> None:
    doc = {"command": command, "params": params}
    (out_dir / "config.lock").write_text(
        json.dumps(doc, indent=2, sort_keys=True) + "\n", encoding="utf-8"
    )


def load_any_store(path: Path) -> MultiVectorStore:
    """Accept either a raw token store (CBTK) or a quantized .mvq container."""
    with open(path, "rb") as fh:
        magic = fh.read(4)
    if magic == MAGIC:
        return build_multivector_store(load_store(path))
    return MultiVectorStore.load(path)


def _filter_role(records, manifest, role):
    if manifest is None:
        return records
    wanted = manifest.queries if role == "query" else manifest.gallery
    return [r for r in records if r.image_id in wanted]


# --- commands -------------------------------------------------------------

def cmd_synth(args) -> None:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    spec = SynthSpec(
        identities=args.identities,
        gallery_views=args.gallery_views,
        query_views=args.query_views,
        sigma_deg=args.sigma_deg,
        distractors=args.distractors,
        n_tokens=args.n_tokens,
        dim=args.dim,
        seed=args.seed,
    )
    records, manifest = generate_benchmark(spec)
    write_store(records, out / "tokens.cbtk")
    manifest.save(out / "manifest.jsonl")
    write_lock(out, "synth", vars(args) | {"from_lock": None})
    print(f"synth: {len(records)} images "
          f"({len(manifest.queries)} queries, {len(manifest.gallery)} gallery) -> {out}")


def cmd_aggregate(args) -> None:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    records = load_store(args.store)
    threads = resolve_threads(args.threads)
    t0 = time.perf_counter()
    if args.aggregator == "seed":
        def one(ts):
            return build_instance_tokens(ts, args.seeds, args.assign, args.k,
                                         tau=args.tau, rng_seed=args.seed)
    else:
        variant = "medoid" if args.aggregator == "kmeans_medoid" else "centroid"

        def one(ts):
            return kmeans_per_image(ts, args.k, rng_seed=args.seed, variant=variant)

    def guarded(ts):
        try:
            return one(ts)
        except TokenRankError as exc:
            raise ValidationError(f"record {ts.image_id!r}: {exc}") from None

    sets = parallel_map(guarded, records, threads)
    elapsed = time.perf_counter() - t0
    write_instance_store(sets, out / "instance.cbtk", out / "provenance.json")
    write_lock(out, "aggregate", vars(args) | {"from_lock": None})
    evals = sum(s.provenance.get("sim_evals", 0) for s in sets)
    rate = len(sets) / elapsed if elapsed > 0 else float("inf")
    print(f"aggregate: {len(sets)} images at {rate:.0f} img/s, "
          f"{evals} token-seed similarity evaluations -> {out}")


def cmd_pool(args) -> None:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    records = load_store(args.store)
    threads = resolve_threads(args.threads)
    descs = parallel_map(lambda ts: pool(ts, args.pool, args.gem_p), records, threads)
    write_descriptors(descs, out / "descriptors.cbtk")
    write_lock(out, "pool", vars(args) | {"from_lock": None})
    print(f"pool: {len(descs)} descriptors ({args.pool}) -> {out}")


def cmd_codebook(args) -> None:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    records = load_store(args.store)
    manifest = load_manifest(args.manifest) if args.manifest else None
    gallery_records = _filter_role(records, manifest, "gallery")
    sample = sample_tokens(gallery_records, budget=args.sample_budget, rng_seed=args.seed)
    cb = train_codebook(sample, args.k, iters=args.iters, rng_seed=args.seed)
    cb.save(out / "codebook.bin")
    messages = [f"codebook: K={args.k} trained on {sample.shape[0]} tokens"]
    if args.encode == "mv":
        sets = [vlad_encode(ts, cb, mode="mv", soft_alpha=args.alpha) for ts in records]
        write_instance_store(sets, out / "vlad_mv.cbtk")
        messages.append(f"encoded {len(sets)} mv descriptors")
    elif args.encode == "sv":
        raw_gallery = np.stack([
            vlad_encode(ts, cb, mode="raw", soft_alpha=args.alpha)
            for ts in gallery_records
        ])
        pca = fit_pca(raw_gallery, out_dim=args.pca_dim)
        pca.save(out / "pca.bin")
        descs = [vlad_encode(ts, cb, mode="sv", soft_alpha=args.alpha, pca=pca)
                 for ts in records]
        write_descriptors(descs, out / "vlad_sv.cbtk")
        messages.append(f"encoded {len(descs)} sv descriptors (pca {args.pca_dim}d)")
    write_lock(out, "codebook", vars(args) | {"from_lock": None})
    print("; ".join(messages) + f" -> {out}")


def cmd_index(args) -> None:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    descs = read_descriptors(args.desc)
    manifest = load_manifest(args.manifest) if args.manifest else None
    if manifest is not None:
        descs = [d for d in descs if d.image_id in manifest.gallery]
    index = build_flat_index(descs)
    index.save(out / "index.bin")
    write_lock(out, "index", vars(args) | {"from_lock": None})
    print(f"index: {len(index)} vectors, dim {index.dim} -> {out}")


def cmd_search(args) -> None:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    index = FlatIndex.load(args.index)
    threads = resolve_threads(args.threads)
    manifest = load_manifest(args.manifest) if args.manifest else None

    q_descs = read_descriptors(args.query_desc)
    if manifest is not None:
        q_descs = [d for d in q_descs if d.image_id in manifest.queries]
    if not q_descs:
        raise ValidationError("no query descriptors to search")

    store = None
    q_tokens = {}
    if not args.stage1_only:
        if not args.store or not args.query_store:
            raise ValidationError("two-stage search needs --store and --query-store")
        store = load_any_store(Path(args.store))
        if manifest is not None:
            store = store.subset([g for g in store.image_ids if g in manifest.gallery])
        for ts in load_store(args.query_store):
            q_tokens[ts.image_id] = ts.tokens
        missing = [d.image_id for d in q_descs if d.image_id not in q_tokens]
        if missing:
            raise ValidationError(f"query {missing[0]!r} missing from --query-store")
        k_tokens = max(store.token_count(i) for i in range(len(store)))
    else:
        k_tokens = 0

    shortlist = [int(s) for s in str(args.shortlist).split(",") if s]
    if args.stage1_only:
        runs = parallel_map(lambda d: stage1_search(index, d, args.depth), q_descs, threads)
        write_runs(runs, out / "run_sv.tsv")
        write_timing(timing_summary(runs, 0, 0), out / "timing_sv.json")
        print(f"search: stage-1 only, {len(runs)} queries -> {out}")
    else:
        if args.exhaustive:
            cache = store.decode_all()
            runs = parallel_map(
                lambda d: exhaustive_search(store, d.image_id, q_tokens[d.image_id],
                                            cache, top_n=args.depth),
                q_descs, threads)
            write_runs(runs, out / "run_full.tsv")
            write_timing(timing_summary(runs, len(store), k_tokens),
                         out / "timing_full.json")
            print(f"search: exhaustive, {len(runs)} queries -> {out}")
        for s in shortlist:
            runs = parallel_map(
                lambda d: two_stage_search(index, store, d, q_tokens[d.image_id], s),
                q_descs, threads)
            write_runs(runs, out / f"run_S{s}.tsv")
            write_timing(timing_summary(runs, s, k_tokens), out / f"timing_S{s}.json")
            print(f"search: S={s}, {len(runs)} queries -> {out}")
    write_lock(out, "search", vars(args) | {"from_lock": None})


def cmd_quantize(args) -> None:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    parse_codec(args.codec)
    store = load_any_store(Path(args.store))
    q = quantize_store(store, args.codec, rng_seed=args.seed)
    name = args.codec.replace(":", "")
    q.save(out / f"store_{name}.mvq")
    write_lock(out, "quantize", vars(args) | {"from_lock": None})
    print(f"quantize: {q.total_tokens} tokens as {args.codec} "
          f"({q.bytes_per_token} B/token) -> {out}")


def cmd_eval(args) -> None:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    manifest = load_manifest(args.manifest)
    ks = [int(k) for k in str(args.ks).split(",") if k]
    shortlist_sizes = [int(s) for s in str(args.shortlist_sizes).split(",") if s]
    config = {"ks": ks, "shortlist_sizes": shortlist_sizes}
    for run_path in args.runs:
        runs = read_runs(run_path)
        report = emit_report(runs, manifest, config | {"run": Path(run_path).name},
                             recall_ks=ks, shortlist_sizes=shortlist_sizes)
        stem = Path(run_path).stem
        write_report(report, out / f"report_{stem}.json", out / f"report_{stem}.txt")
        print(f"eval: {stem}: mAP={report.map:.4f} "
              + " ".join(f"R@{k}={report.recall_at[k]:.4f}" for k in ks))
    write_lock(out, "eval", vars(args) | {"from_lock": None})


# --- parser ---------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="tokenrank",
        description="Training-free multi-vector image retrieval pipeline.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def add_common(p):
        p.add_argument("--out", required=True, help="output directory")
        p.add_argument("--seed", type=int, default=0, help="base RNG seed")
        p.add_argument("--threads", type=int, default=None,
                       help="worker threads (default: TOKENRANK_THREADS or all cores)")
        p.add_argument("--from-lock", default=None, help="re-run from a config.lock file")

    p = sub.add_parser("synth", help="generate a synthetic benchmark")
    add_common(p)
    p.add_argument("--identities", type=int, default=100)
    p.add_argument("--gallery-views", type=int, default=2)
    p.add_argument("--query-views", type=int, default=5)
    p.add_argument("--sigma-deg", type=float, default=15.0)
    p.add_argument("--distractors", type=int, default=0)
    p.add_argument("--n-tokens", type=int, default=48)
    p.add_argument("--dim", type=int, default=24)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("aggregate", help="compress patch tokens into instance tokens")
    add_common(p)
    p.add_argument("--store", required=True, help="input token store (CBTK)")
    p.add_argument("--k", type=int, default=16)
    p.add_argument("--seeds", choices=SEED_STRATEGIES, default="fps")
    p.add_argument("--assign", choices=ASSIGN_MODES, default="hard_top1")
    p.add_argument("--tau", type=float, default=1.0)
    p.add_argument("--aggregator", choices=("seed", "kmeans", "kmeans_medoid"),
                   default="seed")
    p.set_defaults(func=cmd_aggregate)

    p = sub.add_parser("pool", help="pool token sets into global descriptors")
    add_common(p)
    p.add_argument("--store", required=True)
    p.add_argument("--pool", choices=POOL_METHODS, default="mean")
    p.add_argument("--gem-p", type=float, default=3.0)
    p.set_defaults(func=cmd_pool)

    p = sub.add_parser("codebook", help="train a codebook and VLAD-encode")
    add_common(p)
    p.add_argument("--store", required=True)
    p.add_argument("--manifest", default=None,
                   help="restrict training (and PCA fitting) to gallery images")
    p.add_argument("--k", type=int, default=64)
    p.add_argument("--iters", type=int, default=25)
    p.add_argument("--sample-budget", type=int, default=500_000)
    p.add_argument("--encode", choices=("none", "sv", "mv"), default="none")
    p.add_argument("--alpha", type=float, default=None,
                   help="soft-assignment sharpness (hard assignment when unset)")
    p.add_argument("--pca-dim", type=int, default=384)
    p.set_defaults(func=cmd_codebook)

    p = sub.add_parser("index", help="build the flat inner-product index")
    add_common(p)
    p.add_argument("--desc", required=True, help="descriptor store (CBTK, N=1)")
    p.add_argument("--manifest", default=None, help="keep only gallery images")
    p.set_defaults(func=cmd_index)

    p = sub.add_parser("search", help="run two-stage (or stage-1 / exhaustive) search")
    add_common(p)
    p.add_argument("--index", required=True)
    p.add_argument("--store", default=None, help="gallery token store (CBTK or .mvq)")
    p.add_argument("--query-desc", required=True)
    p.add_argument("--query-store", default=None)
    p.add_argument("--manifest", default=None, help="restrict queries to manifest roles")
    p.add_argument("--shortlist", default="50,100,200,500",
                   help="comma-separated shortlist sizes")
    p.add_argument("--depth", type=int, default=1000,
                   help="rows materialized for stage-1/exhaustive runs")
    p.add_argument("--stage1-only", action="store_true")
    p.add_argument("--exhaustive", action="store_true")
    p.set_defaults(func=cmd_search)

    p = sub.add_parser("quantize", help="re-encode a token store under a codec")
    add_common(p)
    p.add_argument("--store", required=True)
    p.add_argument("--codec", default="int8", help="f32 | fp16 | int8 | pq:m")
    p.set_defaults(func=cmd_quantize)

    p = sub.add_parser("eval", help="score run files against a manifest")
    add_common(p)
    p.add_argument("--runs", nargs="+", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--ks", default="1,5,10")
    p.add_argument("--shortlist-sizes", default="")
    p.set_defaults(func=cmd_eval)

    return parser


def _apply_lock(args: argparse.Namespace, parser: argparse.ArgumentParser) -> argparse.Namespace:
    lock_path = getattr(args, "from_lock", None)
    if not lock_path:
        return args
    doc = json.loads(Path(lock_path).read_text(encoding="utf-8"))
    if doc.get("command") != args.command:
        raise ValidationError(
            f"lock file is for {doc.get('command')!r}, not {args.command!r}"
        )
    params = dict(doc.get("params", {}))
    params.pop("from_lock", None)
    params.pop("func", None)
    out_override = args.out
    for key, value in params.items():
        setattr(args, key, value)
    args.out = out_override
    return args


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        args = _apply_lock(args, parser)
        func = args.func
        clean = argparse.Namespace(**{k: v for k, v in vars(args).items() if k != "func"})
        func(clean)
    except CorruptionError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except TokenRankError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
