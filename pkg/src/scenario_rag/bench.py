"""Benchmark harness: corpus scaling, index timing, parameter sweeps.

The embedded corpus is scaled up by sampling parents density-proportionally
and interpolating toward one of their nearest neighbors, so the synthetic
points respect the original distribution. Each index method is then built
and timed on batches of concurrent queries, with recall measured against an
exact scan of the same corpus and retrieved distances kept for
accuracy-neutrality comparisons against the full-corpus exact scan.
"""
from __future__ import annotations

import csv
import math
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Optional, Sequence

import jsonschema
import numpy as np

from .density import estimate_density, select_tsd
from .errors import ConfigError, InputError
from .index import SearchResult, build_flat, build_index, parse_method, search

REPORT_VERSION = "v1"
_KNN_POOL = 10
_CHUNK = 512

REPORT_SCHEMA = {
    "type": "object",
    "required": [
        "version",
        "method",
        "corpus",
        "build_ms",
        "mean_batch_search_ms",
        "add_ms",
        "recall_at_k",
        "k",
        "mean_retrieved_distance",
    ],
    "properties": {
        "version": {"const": REPORT_VERSION},
        "method": {"type": "string"},
        "corpus": {
            "type": "object",
            "required": ["N", "dim", "tsd"],
            "properties": {
                "N": {"type": "integer", "minimum": 1},
                "dim": {"type": "integer", "minimum": 1},
                "tsd": {"type": "boolean"},
            },
        },
        "build_ms": {"type": "number", "exclusiveMinimum": 0},
        "mean_batch_search_ms": {"type": "number", "exclusiveMinimum": 0},
        "add_ms": {"type": "number", "exclusiveMinimum": 0},
        "recall_at_k": {"type": "number", "minimum": 0, "maximum": 1},
        "k": {"type": "integer", "minimum": 1},
        "mean_retrieved_distance": {"type": "number", "minimum": 0},
    },
}


@dataclass
class BenchReport:
    """One method's timing and accuracy summary.

    ``mean_batch_search_ms`` is the median across timed batches (medians
    resist scheduler noise better than means on shared machines); recall is
    measured against an exact scan of the same corpus the method searched.
    """

    method: str
    corpus_n: int
    dim: int
    tsd: bool
    build_ms: float
    mean_batch_search_ms: float
    add_ms: float
    recall_at_k: float
    k: int
    mean_retrieved_distance: float

    def to_dict(self) -> dict:
        return {
            "version": REPORT_VERSION,
            "method": self.method,
            "corpus": {"N": self.corpus_n, "dim": self.dim, "tsd": self.tsd},
            "build_ms": self.build_ms,
            "mean_batch_search_ms": self.mean_batch_search_ms,
            "add_ms": self.add_ms,
            "recall_at_k": self.recall_at_k,
            "k": self.k,
            "mean_retrieved_distance": self.mean_retrieved_distance,
        }


def validate_report(report: dict) -> None:
    jsonschema.validate(report, REPORT_SCHEMA)


# ---------------------------------------------------------------------------
# corpus expansion


def _knn_table(V: np.ndarray, pool: int = _KNN_POOL) -> np.ndarray:
    """Index of each row's `pool` nearest neighbors (self excluded)."""
    n = len(V)
    pool = min(pool, n - 1)
    out = np.empty((n, pool), dtype=np.int64)
    v_sq = (V * V).sum(axis=1)
    for lo in range(0, n, _CHUNK):
        chunk = V[lo : lo + _CHUNK]
        sq = (chunk * chunk).sum(axis=1)[:, None] + v_sq[None, :]
        sq -= 2.0 * (chunk @ V.T)
        rows = np.arange(lo, min(lo + _CHUNK, n))
        sq[np.arange(len(rows)), rows] = np.inf
        out[rows] = np.argpartition(sq, pool - 1, axis=1)[:, :pool]
    return out


def _interpolated_points(
    V: np.ndarray, count: int, rng: np.random.Generator
) -> tuple[np.ndarray, np.ndarray]:
    """Sample `count` convex interpolations between neighbors.

    Parents are drawn density-proportionally so dense regions spawn more
    points; each pairs with one of its nearest neighbors at a uniform
    mixing weight in (0, 1). Returns (points, parents) where parents rows
    are (i, j, lam).
    """
    densities = estimate_density(V, seed=int(rng.integers(2**31))).densities
    p = densities / densities.sum()
    knn = _knn_table(V)
    i = rng.choice(len(V), size=count, p=p)
    j = knn[i, rng.integers(0, knn.shape[1], size=count)]
    lam = rng.uniform(np.finfo(np.float64).tiny, 1.0, size=count)
    points = lam[:, None] * V[i] + (1.0 - lam)[:, None] * V[j]
    parents = np.column_stack([i.astype(np.float64), j.astype(np.float64), lam])
    return points, parents


def expand_corpus(
    vectors,
    target_n: int,
    seed: int = 0,
    return_parents: bool = False,
):
    """Grow the corpus to target_n rows by density-aware interpolation.

    The original rows come first, unchanged. With return_parents, also
    returns a (new_count, 3) array of (parent_i, parent_j, lam) for each
    generated row, in order.
    """
    V = np.asarray(vectors, dtype=np.float64)
    if V.ndim != 2 or len(V) < 2:
        raise InputError("need a 2-d corpus with at least two vectors")
    if target_n < len(V):
        raise InputError(f"target_n {target_n} is below corpus size {len(V)}")
    count = target_n - len(V)
    if count == 0:
        out = V.copy()
        parents = np.empty((0, 3))
    else:
        rng = np.random.default_rng(seed)
        points, parents = _interpolated_points(V, count, rng)
        out = np.vstack([V, points])
    if return_parents:
        return out, parents
    return out


def sample_queries(vectors, count: int, seed: int = 0) -> np.ndarray:
    """Draw query vectors from the corpus distribution (same interpolation)."""
    V = np.asarray(vectors, dtype=np.float64)
    if V.ndim != 2 or len(V) < 2:
        raise InputError("need a 2-d corpus with at least two vectors")
    if count < 1:
        raise InputError("count must be >= 1")
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x51]))
    points, _ = _interpolated_points(V, count, rng)
    return points


def make_ids(n: int, prefix: str = "v") -> list[str]:
    return [f"{prefix}{i:06d}" for i in range(n)]


# ---------------------------------------------------------------------------
# timing harness


@dataclass
class BenchParams:
    k: int = 4
    batches: int = 5
    warmup: int = 3
    ef_search: Optional[int] = None
    nprobe: Optional[int] = None
    workers: Optional[int] = None
    add_trials: int = 10
    seed: int = 0

    def __post_init__(self):
        if self.k < 1 or self.batches < 1 or self.warmup < 0:
            raise ConfigError("need k >= 1, batches >= 1, warmup >= 0")
        if self.add_trials < 1:
            raise ConfigError("add_trials must be >= 1")


def _split_method(entry: str) -> tuple[str, bool]:
    if entry.endswith("+tsd"):
        method, tsd = entry[: -len("+tsd")], True
    else:
        method, tsd = entry, False
    parse_method(method)  # validate early
    return method, tsd


def _concurrent_search(index, queries, params: BenchParams) -> list[SearchResult]:
    workers = params.workers or os.cpu_count() or 1
    if workers <= 1 or len(queries) < 2 * workers:
        return search(
            index, queries, params.k,
            ef_search=params.ef_search, nprobe=params.nprobe,
        )
    chunks = np.array_split(queries, workers)
    with ThreadPoolExecutor(max_workers=workers) as pool:
        parts = list(
            pool.map(
                lambda chunk: search(
                    index, chunk, params.k,
                    ef_search=params.ef_search, nprobe=params.nprobe,
                ),
                chunks,
            )
        )
    return [r for part in parts for r in part]


def recall_against(
    results: Sequence[SearchResult], oracle: Sequence[SearchResult], k: int
) -> float:
    """Fraction of oracle top-k ids recovered, averaged over queries."""
    if len(results) != len(oracle):
        raise InputError("results and oracle must align")
    hits = 0
    total = 0
    for got, want in zip(results, oracle):
        want_ids = want.neighbor_ids[:k]
        hits += len(set(got.neighbor_ids[:k]) & set(want_ids))
        total += len(want_ids)
    return hits / total if total else 1.0


def bench_search(
    vectors,
    ids: Sequence[str],
    methods: Sequence[str],
    queries,
    params: Optional[BenchParams] = None,
    tsd_ids: Optional[Sequence[str]] = None,
) -> list[BenchReport]:
    """Build and time each method; "<method>+tsd" builds on the TSD subset.

    All indexes are built and warmed first; the timed batches then cycle
    through the methods round-robin so their medians are paired under the
    same machine conditions.
    """
    params = params or BenchParams()
    if not methods:
        raise ConfigError("methods must be nonempty")
    V = np.asarray(vectors, dtype=np.float64)
    Q = np.asarray(queries, dtype=np.float64)
    ids = list(ids)
    tsd_rows = None
    if tsd_ids is not None:
        keep = set(tsd_ids)
        tsd_rows = [i for i, sid in enumerate(ids) if sid in keep]

    oracle_cache: dict[bool, list[SearchResult]] = {}

    def oracle_for(tsd: bool) -> list[SearchResult]:
        if tsd not in oracle_cache:
            if tsd:
                flat = build_flat(V[tsd_rows], [ids[i] for i in tsd_rows])
            else:
                flat = build_flat(V, ids)
            oracle_cache[tsd] = flat.search_batch(Q, params.k)
        return oracle_cache[tsd]

    rng = np.random.default_rng(np.random.SeedSequence([params.seed, 0xADD]))
    prepared = []
    for entry in methods:
        method, tsd = _split_method(entry)
        if tsd:
            if tsd_rows is None:
                raise ConfigError(f"{entry!r} requires tsd_ids")
            X, xids = V[tsd_rows], [ids[i] for i in tsd_rows]
        else:
            X, xids = V, ids
        t0 = time.perf_counter()
        index = build_index(method, X, xids, seed=params.seed)
        build_ms = (time.perf_counter() - t0) * 1e3
        for _ in range(params.warmup):
            _concurrent_search(index, Q, params)
        prepared.append(
            {"entry": entry, "tsd": tsd, "X": X, "index": index,
             "build_ms": build_ms, "batch_ms": [], "results": None}
        )

    # Timed batches are interleaved round-robin so every method samples the
    # same load windows; a background burst then inflates all medians alike
    # instead of whichever method it happened to land on.
    for _ in range(params.batches):
        for p in prepared:
            t0 = time.perf_counter()
            batch = _concurrent_search(p["index"], Q, params)
            p["batch_ms"].append((time.perf_counter() - t0) * 1e3)
            if p["results"] is None:
                p["results"] = batch

    reports = []
    for p in prepared:
        entry, X, index = p["entry"], p["X"], p["index"]
        add_points, _ = _interpolated_points(X, params.add_trials, rng)
        t0 = time.perf_counter()
        for j, point in enumerate(add_points):
            index.insert(point, f"bench-add-{entry}-{j}")
        add_ms = (time.perf_counter() - t0) * 1e3 / params.add_trials

        reports.append(
            BenchReport(
                method=entry,
                corpus_n=len(X),
                dim=X.shape[1],
                tsd=p["tsd"],
                build_ms=max(p["build_ms"], 1e-6),
                mean_batch_search_ms=max(float(np.median(p["batch_ms"])), 1e-6),
                add_ms=max(add_ms, 1e-6),
                recall_at_k=recall_against(p["results"], oracle_for(p["tsd"]), params.k),
                k=params.k,
                mean_retrieved_distance=float(
                    np.mean([r.distances[0] for r in p["results"] if len(r.distances)])
                ),
            )
        )
    return reports


# ---------------------------------------------------------------------------
# parameter sweep


@dataclass
class SweepCell:
    alpha_pct: float
    beta_pct: float
    tsd_size: int
    search_ms: float
    mean_retrieved_distance: float
    recall_at_k: float

    def to_row(self) -> dict:
        return {
            "alpha_pct": self.alpha_pct,
            "beta_pct": self.beta_pct,
            "tsd_size": self.tsd_size,
            "search_ms": round(self.search_ms, 3),
            "mean_retrieved_distance": round(self.mean_retrieved_distance, 4),
            "recall_at_k": round(self.recall_at_k, 4),
        }


def sweep(
    vectors,
    queries,
    alphas: Sequence[float],
    betas: Sequence[float],
    method: str = "hnsw32",
    params: Optional[BenchParams] = None,
    seed: int = 0,
) -> list[SweepCell]:
    """Grid of TSD settings: per (alpha, beta), build the method on the TSD
    subset and measure batch search time, retrieved distance, and recall
    against the full-corpus exact scan."""
    params = params or BenchParams()
    if not alphas or not betas:
        raise ConfigError("alphas and betas must be nonempty")
    V = np.asarray(vectors, dtype=np.float64)
    Q = np.asarray(queries, dtype=np.float64)
    ids = make_ids(len(V))
    est = estimate_density(V, seed=seed, ids=ids)
    full_oracle = build_flat(V, ids).search_batch(Q, params.k)
    cells = []
    for alpha in alphas:
        for beta in betas:
            subset = select_tsd(est, alpha, beta, seed=seed)
            rows = sorted(ids.index(sid) for sid in subset.retained_ids)
            index = build_index(
                method, V[rows], [ids[i] for i in rows], seed=params.seed
            )
            for _ in range(params.warmup):
                _concurrent_search(index, Q, params)
            batch_ms = []
            results = None
            for _ in range(params.batches):
                t0 = time.perf_counter()
                batch = _concurrent_search(index, Q, params)
                batch_ms.append((time.perf_counter() - t0) * 1e3)
                if results is None:
                    results = batch
            cells.append(
                SweepCell(
                    alpha_pct=float(alpha),
                    beta_pct=float(beta),
                    tsd_size=len(subset),
                    search_ms=float(np.median(batch_ms)),
                    mean_retrieved_distance=float(
                        np.mean([r.distances[0] for r in results])
                    ),
                    recall_at_k=recall_against(results, full_oracle, params.k),
                )
            )
    return cells


def sweep_to_csv(cells: Sequence[SweepCell], path: str) -> None:
    fields = [
        "alpha_pct",
        "beta_pct",
        "tsd_size",
        "search_ms",
        "mean_retrieved_distance",
        "recall_at_k",
    ]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=fields)
        writer.writeheader()
        for cell in cells:
            writer.writerow(cell.to_row())
