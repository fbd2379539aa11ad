"""Command-line interface for the scenario retrieval pipeline.

Subcommands mirror the artifact flow: generate or ingest scenarios into a
JSONL store, compute the pairwise distance matrix, fit and apply the
embedding, select the typical subset, build per-interaction-type indexes,
then search, expand, benchmark, sweep parameters, or dry-run the full
retrieval-augmented prompt assembly.
"""
from __future__ import annotations

import argparse
import json
import os
import re
import sys
from typing import Optional, Sequence

import numpy as np

from .bench import (
    BenchParams,
    bench_search,
    expand_corpus,
    sample_queries,
    sweep,
    sweep_to_csv,
    validate_report,
)
from .density import estimate_density, select_tsd
from .embedding import (
    LandmarkDistanceFn,
    embed_batch,
    embed_distances,
    fit,
    load_model,
    save_model,
    select_landmarks,
)
from .errors import ConfigError, DataError, ScenarioRagError
from .graph_dtw import (
    DtwConfig,
    SceneCostConfig,
    configs_hash,
    load_matrix,
    pairwise_matrix,
    save_matrix,
)
from .index import build_index, expand, load_index, save_index, search
from .ingest import CsvSchema, Slicing, ingest_csv
from .rag import MockLLMClient, RagParams, engine_from_artifacts, llm_plan, run_rag
from .scenarios import ScenarioStore, save_scenarios, load_scenarios
from .synthetic import SyntheticConfig, generate_synthetic

VECTORS_VERSION = "v1"
TSD_VERSION = "v1"
MANIFEST_VERSION = "v1"


# ---------------------------------------------------------------------------
# artifact helpers


def save_vectors(path: str, ids: Sequence[str], vectors: np.ndarray) -> None:
    with open(path, "wb") as fh:
        np.savez(
            fh,
            version=VECTORS_VERSION,
            ids=json.dumps(list(ids)),
            vectors=np.asarray(vectors, dtype=np.float64),
        )


def load_vectors(path: str) -> tuple[list[str], np.ndarray]:
    with np.load(path, allow_pickle=False) as data:
        if str(data["version"]) != VECTORS_VERSION:
            raise DataError(f"unsupported vectors file version in {path}")
        ids = json.loads(str(data["ids"]))
        return ids, np.asarray(data["vectors"], dtype=np.float64)


def save_tsd_manifest(path: str, subset, total: int) -> None:
    payload = {
        "version": TSD_VERSION,
        "alpha_pct": subset.alpha_pct,
        "beta_pct": subset.beta_pct,
        "seed": subset.seed,
        "threshold": subset.threshold,
        "size": len(subset),
        "total": total,
        "retained_ids": list(subset.retained_ids),
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2)
        fh.write("\n")


def load_tsd_manifest(path: str) -> dict:
    with open(path, "r", encoding="utf-8") as fh:
        payload = json.load(fh)
    if payload.get("version") != TSD_VERSION:
        raise DataError(f"unsupported TSD manifest version in {path}")
    return payload


def _type_filename(interaction_type: str) -> str:
    return re.sub(r"[^A-Za-z0-9_.-]", "_", interaction_type) + ".index.npz"


def write_index_set(
    out_dir: str,
    method: str,
    store: ScenarioStore,
    ids: Sequence[str],
    vectors: np.ndarray,
    tsd_ids: Optional[Sequence[str]] = None,
    seed: int = 0,
    ef_construction: int = 200,
) -> dict:
    """Build one index per interaction type and a manifest referencing them.

    Keeping interaction types in separate files lets retrieval route each
    request to its own expert index and never mix types in one candidate
    list.
    """
    os.makedirs(out_dir, exist_ok=True)
    keep = set(tsd_ids) if tsd_ids is not None else None
    by_type: dict[str, list[int]] = {}
    for row, sid in enumerate(ids):
        if keep is not None and sid not in keep:
            continue
        by_type.setdefault(store.get(sid).interaction_type, []).append(row)
    if not by_type:
        raise DataError("no vectors left to index after TSD filtering")
    manifest = {
        "version": MANIFEST_VERSION,
        "method": method,
        "seed": seed,
        "tsd": keep is not None,
        "types": {},
    }
    for itype in sorted(by_type):
        rows = by_type[itype]
        index = build_index(
            method,
            vectors[rows],
            [ids[r] for r in rows],
            seed=seed,
            ef_construction=ef_construction,
        )
        fname = _type_filename(itype)
        save_index(index, os.path.join(out_dir, fname))
        manifest["types"][itype] = {"path": fname, "count": len(rows)}
    manifest_path = os.path.join(out_dir, "manifest.json")
    with open(manifest_path, "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2)
        fh.write("\n")
    return manifest


def load_index_set(manifest_path: str) -> tuple[dict, dict]:
    """Read a build manifest and every per-type index it references."""
    with open(manifest_path, "r", encoding="utf-8") as fh:
        manifest = json.load(fh)
    if manifest.get("version") != MANIFEST_VERSION:
        raise DataError(f"unsupported index manifest version in {manifest_path}")
    base = os.path.dirname(os.path.abspath(manifest_path))
    indexes = {
        itype: load_index(os.path.join(base, entry["path"]))
        for itype, entry in manifest["types"].items()
    }
    return manifest, indexes


def _store_scenarios(store: ScenarioStore) -> list:
    return [store.get(sid) for sid in store.ids()]


def _landmark_distance_fn(store: ScenarioStore, model) -> LandmarkDistanceFn:
    missing = [lid for lid in model.landmarks if lid not in store]
    if missing:
        raise DataError(f"landmark scenarios missing from store: {missing[:5]}")
    return LandmarkDistanceFn([store.get(lid) for lid in model.landmarks])


def _parse_float_list(text: str, flag: str) -> list[float]:
    try:
        values = [float(tok) for tok in text.split(",") if tok.strip()]
    except ValueError as exc:
        raise ConfigError(f"{flag} expects comma-separated numbers: {exc}")
    if not values:
        raise ConfigError(f"{flag} must list at least one value")
    return values


# ---------------------------------------------------------------------------
# subcommands


def _cmd_gen(args) -> int:
    config = SyntheticConfig(
        num_scenarios=args.count,
        lane_count=args.lanes,
        duration_s=args.duration,
        tick_s=args.tick,
        seed=args.seed,
    )
    scenarios = generate_synthetic(config)
    save_scenarios(scenarios, args.out)
    print(f"wrote {len(scenarios)} scenarios to {args.out}")
    return 0


def _cmd_ingest(args) -> int:
    schema = CsvSchema(
        time=args.time_col,
        vehicle_id=args.id_col,
        x=args.x_col,
        y=args.y_col,
        vx=args.vx_col,
        vy=args.vy_col,
        heading=args.heading_col,
        lane_id=args.lane_col,
        label=args.label_col,
        ego_id=args.ego_id,
    )
    slicing = Slicing(window_s=args.window, stride_s=args.stride)
    scenarios = ingest_csv(args.csv, schema, slicing, radius=args.radius)
    save_scenarios(scenarios, args.out)
    print(f"ingested {len(scenarios)} scenarios from {args.csv} to {args.out}")
    return 0


def _cmd_dist(args) -> int:
    store = ScenarioStore(args.store)
    scenarios = _store_scenarios(store)
    scfg = SceneCostConfig()
    dcfg = DtwConfig(band_radius=args.band)
    D = pairwise_matrix(scenarios, scfg, dcfg, max_workers=args.workers)
    save_matrix(D, args.out, config_hash=configs_hash(scfg, dcfg))
    with open(args.out + ".ids.json", "w", encoding="utf-8") as fh:
        json.dump(store.ids(), fh)
        fh.write("\n")
    print(f"wrote {D.shape[0]}x{D.shape[1]} distance matrix to {args.out}")
    return 0


def _load_matrix_with_ids(path: str) -> tuple[np.ndarray, list[str]]:
    D, _ = load_matrix(path)
    ids_path = path + ".ids.json"
    if not os.path.exists(ids_path):
        raise DataError(f"missing ids sidecar {ids_path}")
    with open(ids_path, "r", encoding="utf-8") as fh:
        ids = json.load(fh)
    if len(ids) != D.shape[0]:
        raise DataError(f"{ids_path} lists {len(ids)} ids for a {D.shape[0]}-row matrix")
    return D, ids


def _cmd_fit_embed(args) -> int:
    D, ids = _load_matrix_with_ids(args.matrix)
    landmark_rows = select_landmarks(D, args.landmarks, seed=args.seed)
    sub = D[np.ix_(landmark_rows, landmark_rows)]
    model = fit(sub, dim=args.dim, landmark_ids=[ids[r] for r in landmark_rows])
    save_model(model, args.out)
    print(
        f"fit dim={model.dim} model on {len(model.landmarks)} landmarks, "
        f"scale={model.scale:.6g}; wrote {args.out}"
    )
    return 0


def _cmd_embed(args) -> int:
    store = ScenarioStore(args.store)
    model = load_model(args.model)
    ids = store.ids()
    if args.matrix:
        D, matrix_ids = _load_matrix_with_ids(args.matrix)
        row_of = {sid: r for r, sid in enumerate(matrix_ids)}
        missing = [lid for lid in model.landmarks if lid not in row_of]
        if missing:
            raise DataError(f"matrix lacks landmark rows: {missing[:5]}")
        cols = [row_of[lid] for lid in model.landmarks]
        vectors = np.stack(
            [
                embed_distances(D[row_of[sid], cols], model).values
                for sid in ids
                if sid in row_of
            ]
        )
        ids = [sid for sid in ids if sid in row_of]
    else:
        fn = _landmark_distance_fn(store, model)
        out = embed_batch(_store_scenarios(store), model, fn, max_workers=args.workers)
        vectors = np.stack([v.values for v in out])
    save_vectors(args.out, ids, vectors)
    print(f"embedded {len(ids)} scenarios at dim={vectors.shape[1]} to {args.out}")
    return 0


def _cmd_tsd(args) -> int:
    ids, V = load_vectors(args.vectors)
    est = estimate_density(V, seed=args.seed, ids=ids)
    subset = select_tsd(est, args.alpha, args.beta, seed=args.seed)
    save_tsd_manifest(args.out, subset, total=len(ids))
    print(
        f"TSD retained {len(subset)}/{len(ids)} "
        f"({len(subset) / len(ids):.3f}) at alpha={args.alpha} beta={args.beta}; "
        f"wrote {args.out}"
    )
    return 0


def _cmd_build(args) -> int:
    ids, V = load_vectors(args.vectors)
    store = ScenarioStore(args.store)
    tsd_ids = load_tsd_manifest(args.tsd)["retained_ids"] if args.tsd else None
    manifest = write_index_set(
        args.out_dir,
        args.method,
        store,
        ids,
        V,
        tsd_ids=tsd_ids,
        seed=args.seed,
        ef_construction=args.ef_construction,
    )
    for itype, entry in manifest["types"].items():
        print(f"built {args.method} index for {itype!r}: {entry['count']} vectors")
    print(f"wrote manifest to {os.path.join(args.out_dir, 'manifest.json')}")
    return 0


def _cmd_search(args) -> int:
    store = ScenarioStore(args.store)
    model = load_model(args.model)
    _, indexes = load_index_set(args.index_manifest)
    scenario = store.get(args.id)
    itype = args.type or scenario.interaction_type
    if itype not in indexes:
        raise DataError(f"no index for interaction type {itype!r}")
    fn = _landmark_distance_fn(store, model)
    vector = embed_batch([scenario], model, fn)[0].values
    (result,) = search(indexes[itype], vector[None, :], args.k, ef_search=args.ef_search)
    payload = {
        "query": args.id,
        "type": itype,
        "neighbors": [
            {"id": sid, "distance": float(d)}
            for sid, d in zip(result.neighbor_ids, result.distances.tolist())
        ],
    }
    print(json.dumps(payload))
    return 0


def _cmd_expand_db(args) -> int:
    store = ScenarioStore(args.store)
    model = load_model(args.model)
    manifest, indexes = load_index_set(args.index_manifest)
    new_scenarios = load_scenarios(args.new)
    fn = _landmark_distance_fn(store, model)
    base = os.path.dirname(os.path.abspath(args.index_manifest))
    touched = set()
    for scenario in new_scenarios:
        itype = scenario.interaction_type
        if itype not in indexes:
            raise DataError(f"no index for interaction type {itype!r}")
        index = indexes[itype]
        vector = embed_batch([scenario], model, fn)[0].values
        (result,) = search(index, vector[None, :], 1)
        nearest = float(result.distances[0]) if len(result.distances) else None
        expanded = expand(
            index, store, scenario, vector, result=result, threshold=args.threshold
        )
        if expanded:
            touched.add(itype)
            manifest["types"][itype]["count"] += 1
        print(
            json.dumps(
                {"id": scenario.scenario_id, "nearest": nearest, "expanded": expanded}
            )
        )
    for itype in sorted(touched):
        save_index(indexes[itype], os.path.join(base, manifest["types"][itype]["path"]))
    if touched:
        with open(args.index_manifest, "w", encoding="utf-8") as fh:
            json.dump(manifest, fh, indent=2)
            fh.write("\n")
    return 0


def _cmd_bench(args) -> int:
    ids, V = load_vectors(args.vectors)
    if args.target_n:
        V = expand_corpus(V, args.target_n, seed=args.seed)
        ids = ids + [f"exp{r:06d}" for r in range(len(ids), len(V))]
    queries = sample_queries(V, args.queries, seed=args.seed)
    tsd_ids = None
    if args.tsd:
        tsd_ids = load_tsd_manifest(args.tsd)["retained_ids"]
    params = BenchParams(
        k=args.k,
        batches=args.batches,
        warmup=args.warmup,
        ef_search=args.ef_search,
        nprobe=args.nprobe,
        workers=args.workers,
        seed=args.seed,
    )
    reports = bench_search(
        V,
        ids,
        [m for m in args.methods.split(",") if m],
        queries,
        params,
        tsd_ids=tsd_ids,
    )
    payloads = [r.to_dict() for r in reports]
    for payload in payloads:
        validate_report(payload)
    doc = {"queries": len(queries), "reports": payloads}
    text = json.dumps(doc, indent=2) + "\n"
    if args.out:
        with open(args.out, "w", encoding="utf-8") as fh:
            fh.write(text)
    else:
        sys.stdout.write(text)
    for r in reports:
        print(
            f"{r.method}: N={r.corpus_n} build={r.build_ms:.1f}ms "
            f"search={r.mean_batch_search_ms:.1f}ms add={r.add_ms:.2f}ms "
            f"recall@{r.k}={r.recall_at_k:.3f} dist={r.mean_retrieved_distance:.3f}",
            file=sys.stderr,
        )
    return 0


def _cmd_sweep(args) -> int:
    _, V = load_vectors(args.vectors)
    queries = sample_queries(V, args.queries, seed=args.seed)
    params = BenchParams(
        k=args.k,
        batches=args.batches,
        warmup=args.warmup,
        ef_search=args.ef_search,
        workers=args.workers,
        seed=args.seed,
    )
    cells = sweep(
        V,
        queries,
        _parse_float_list(args.alphas, "--alphas"),
        _parse_float_list(args.betas, "--betas"),
        method=args.method,
        params=params,
        seed=args.seed,
    )
    sweep_to_csv(cells, args.out)
    print(f"wrote {len(cells)} sweep cells to {args.out}")
    return 0


def _cmd_rag_dry_run(args) -> int:
    store = ScenarioStore(args.store)
    model = load_model(args.model)
    _, indexes = load_index_set(args.index_manifest)
    engine = engine_from_artifacts(store, model, indexes)
    scenario_id = args.id or store.ids()[0]
    scenario = store.get(scenario_id)
    params = RagParams(
        n=args.n,
        K=args.K,
        M=args.M,
        D=args.D,
        ef_search=args.ef_search,
        expand_db=args.expand,
    )
    bundle, selection = run_rag(scenario, engine, params)
    text = bundle.render()
    if args.out:
        with open(args.out, "w", encoding="utf-8") as fh:
            fh.write(text)
    else:
        sys.stdout.write(text + "\n")
    response = llm_plan(bundle, MockLLMClient())
    summary = {
        "scenario": scenario_id,
        "chosen": list(selection.chosen_ids),
        "dropped": len(selection.dropped),
        "plan_points": len(response.waypoints),
        "bundle_chars": len(text),
    }
    print(json.dumps(summary))
    return 0


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="scenario-rag",
        description="Driving-scenario retrieval pipeline: generate, embed, "
        "index, search, and assemble retrieval-augmented prompts.",
    )
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")

    def add(name, func, help_text):
        p = sub.add_parser(name, help=help_text, description=help_text)
        p.add_argument("--seed", type=int, default=0, help="RNG seed (default 0)")
        p.set_defaults(func=func)
        return p

    p = add("gen", _cmd_gen, "generate a synthetic scenario corpus")
    p.add_argument("--out", required=True, help="output scenario JSONL path")
    p.add_argument("--count", type=int, default=200, help="number of scenarios")
    p.add_argument("--lanes", type=int, default=3)
    p.add_argument("--duration", type=float, default=5.0, help="seconds per scenario")
    p.add_argument("--tick", type=float, default=0.1, help="seconds per frame")

    p = add("ingest", _cmd_ingest, "slice a trajectory CSV into scenarios")
    p.add_argument("--csv", required=True)
    p.add_argument("--out", required=True, help="output scenario JSONL path")
    p.add_argument("--window", type=float, default=5.0, help="slice length, seconds")
    p.add_argument("--stride", type=float, default=2.5, help="slice stride, seconds")
    p.add_argument("--radius", type=float, default=30.0, help="relation radius, m")
    p.add_argument("--time-col", default="time")
    p.add_argument("--id-col", default="vehicle_id")
    p.add_argument("--x-col", default="x")
    p.add_argument("--y-col", default="y")
    p.add_argument("--vx-col", default="vx")
    p.add_argument("--vy-col", default="vy")
    p.add_argument("--heading-col", default="heading")
    p.add_argument("--lane-col", default=None)
    p.add_argument("--label-col", default=None)
    p.add_argument("--ego-id", default=None, help="pin a fixed ego vehicle id")

    p = add("dist", _cmd_dist, "compute the pairwise scenario distance matrix")
    p.add_argument("--store", required=True, help="scenario JSONL path")
    p.add_argument("--out", required=True, help="output matrix path (float32)")
    p.add_argument("--band", type=int, default=None, help="warping band radius")
    p.add_argument("--workers", type=int, default=None)

    p = add("fit-embed", _cmd_fit_embed, "fit the landmark embedding model")
    p.add_argument("--matrix", required=True, help="matrix path from `dist`")
    p.add_argument("--out", required=True, help="output model .npz path")
    p.add_argument("--dim", type=int, default=64)
    p.add_argument("--landmarks", type=int, default=512)

    p = add("embed", _cmd_embed, "embed every stored scenario")
    p.add_argument("--store", required=True)
    p.add_argument("--model", required=True)
    p.add_argument("--out", required=True, help="output vectors .npz path")
    p.add_argument(
        "--matrix",
        default=None,
        help="reuse a precomputed distance matrix instead of recomputing",
    )
    p.add_argument("--workers", type=int, default=None)

    p = add("tsd", _cmd_tsd, "select the typical scenario subset")
    p.add_argument("--vectors", required=True)
    p.add_argument("--out", required=True, help="output TSD manifest JSON path")
    p.add_argument("--alpha", type=float, default=90.0, help="density percentile")
    p.add_argument("--beta", type=float, default=5.0, help="dense-sample percent")

    p = add("build", _cmd_build, "build per-interaction-type search indexes")
    p.add_argument("--vectors", required=True)
    p.add_argument("--store", required=True)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--method", default="hnsw32", help="flat | ivf<n> | pq<m> | hnsw<M>")
    p.add_argument("--tsd", default=None, help="TSD manifest restricting the corpus")
    p.add_argument("--ef-construction", type=int, default=200)

    p = add("search", _cmd_search, "retrieve neighbors of a stored scenario")
    p.add_argument("--index-manifest", required=True)
    p.add_argument("--store", required=True)
    p.add_argument("--model", required=True)
    p.add_argument("--id", required=True, help="query scenario id")
    p.add_argument("--type", default=None, help="override interaction type routing")
    p.add_argument("--k", type=int, default=4)
    p.add_argument("--ef-search", type=int, default=None)

    p = add("expand-db", _cmd_expand_db, "append novel scenarios to store and index")
    p.add_argument("--index-manifest", required=True)
    p.add_argument("--store", required=True)
    p.add_argument("--model", required=True)
    p.add_argument("--new", required=True, help="JSONL of candidate scenarios")
    p.add_argument("--threshold", type=float, default=10.0, help="novelty distance")

    p = add("bench", _cmd_bench, "time index builds and batched searches")
    p.add_argument("--vectors", required=True)
    p.add_argument("--methods", default="flat,hnsw32", help="comma-separated")
    p.add_argument("--target-n", type=int, default=None, help="expand corpus first")
    p.add_argument("--queries", type=int, default=500)
    p.add_argument("--batches", type=int, default=5)
    p.add_argument("--warmup", type=int, default=3)
    p.add_argument("--k", type=int, default=4)
    p.add_argument("--ef-search", type=int, default=None)
    p.add_argument("--nprobe", type=int, default=None)
    p.add_argument("--workers", type=int, default=None)
    p.add_argument("--tsd", default=None, help="TSD manifest enabling +tsd methods")
    p.add_argument("--out", default=None, help="report JSON path (default stdout)")

    p = add("sweep", _cmd_sweep, "grid-sweep TSD parameters")
    p.add_argument("--vectors", required=True)
    p.add_argument("--out", required=True, help="output CSV path")
    p.add_argument("--alphas", default="80,90,95", help="comma-separated percents")
    p.add_argument("--betas", default="5,10,20", help="comma-separated percents")
    p.add_argument("--method", default="hnsw32")
    p.add_argument("--queries", type=int, default=100)
    p.add_argument("--batches", type=int, default=3)
    p.add_argument("--warmup", type=int, default=1)
    p.add_argument("--k", type=int, default=4)
    p.add_argument("--ef-search", type=int, default=None)
    p.add_argument("--workers", type=int, default=None)

    p = add("rag-dry-run", _cmd_rag_dry_run, "assemble one retrieval-augmented prompt")
    p.add_argument("--index-manifest", required=True)
    p.add_argument("--store", required=True)
    p.add_argument("--model", required=True)
    p.add_argument("--id", default=None, help="query scenario id (default: first)")
    p.add_argument("--n", type=int, default=5, help="candidate futures per request")
    p.add_argument("--K", type=int, default=4, help="neighbors per candidate")
    p.add_argument("--M", type=int, default=4, help="max reference cases")
    p.add_argument("--D", type=float, default=10.0, help="novelty threshold")
    p.add_argument("--ef-search", type=int, default=None)
    p.add_argument(
        "--expand",
        action="store_true",
        help="append novel prompt scenarios to the store (mutates it)",
    )
    p.add_argument("--out", default=None, help="write the prompt text here")

    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.func(args)
    except ScenarioRagError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
