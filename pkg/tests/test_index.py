"""Vector index tests: every index kind against brute-force oracles.

The reference implementation used throughout is `oracle_topk`, an
independent brute-force ranking that mirrors the reporting convention
(float32 distances, ties broken by lexicographically smaller id).
"""
import os
from concurrent.futures import ThreadPoolExecutor

import numpy as np
import pytest

from scenario_rag.errors import ConfigError, DataError, IndexLoadError, InputError
from scenario_rag.index import (
    FlatIndex,
    SearchResult,
    build_flat,
    build_hnsw,
    build_index,
    build_ivf,
    build_pq,
    default_nprobe,
    expand,
    load_index,
    method_string,
    parse_method,
    save_index,
    search,
)
from scenario_rag.index import storage as index_storage
from scenario_rag.scenarios import ScenarioStore
from scenario_rag.synthetic import SyntheticConfig, generate_synthetic


def oracle_topk(X, ids, q, k):
    """Brute-force top-k with float32 distances and id tie-breaking."""
    d = np.sqrt(((X - q) ** 2).sum(axis=1)).astype(np.float32)
    order = sorted(range(len(X)), key=lambda i: (d[i], ids[i]))[:k]
    return [ids[i] for i in order], d[order]


def results_equal(a: SearchResult, b: SearchResult) -> bool:
    return (
        a.neighbor_ids == b.neighbor_ids
        and np.array_equal(a.distances, b.distances)
        and a.truncated == b.truncated
    )


@pytest.fixture(scope="module")
def corpus():
    rng = np.random.default_rng(42)
    X = rng.normal(size=(1000, 16))
    ids = [f"s{i:04d}" for i in range(1000)]
    queries = rng.normal(size=(20, 16))
    return X, ids, queries


@pytest.fixture(scope="module")
def flat(corpus):
    X, ids, _ = corpus
    return build_flat(X, ids)


@pytest.fixture(scope="module")
def hnsw(corpus):
    X, ids, _ = corpus
    return build_hnsw(X, ids, M=16, seed=5)


# ---------------------------------------------------------------------------
# method strings and dispatch


def test_parse_method_families():
    assert parse_method("flat") == ("flat", None)
    assert parse_method("ivf128") == ("ivf", 128)
    assert parse_method("pq8") == ("pq", 8)
    assert parse_method("hnsw32") == ("hnsw", 32)
    assert parse_method("HNSW16") == ("hnsw", 16)


@pytest.mark.parametrize("bad", ["", "flat16", "ivf", "hnsw", "annoy5", "ivf-3"])
def test_parse_method_rejects(bad):
    with pytest.raises(ConfigError):
        parse_method(bad)


def test_build_index_and_method_string(corpus):
    X, ids, _ = corpus
    for method in ["flat", "ivf16", "pq4", "hnsw8"]:
        idx = build_index(method, X[:200], ids[:200], seed=1)
        assert method_string(idx) == method
        assert len(idx) == 200


def test_search_dispatch_rejects_bad_k(flat):
    with pytest.raises(ConfigError):
        search(flat, np.zeros(16), 0)


# ---------------------------------------------------------------------------
# results container


def test_search_result_validation():
    with pytest.raises(InputError):
        SearchResult(["a"], np.array([1.0, 2.0]))
    with pytest.raises(InputError):
        SearchResult(["a", "a"], np.array([1.0, 2.0]))
    with pytest.raises(InputError):
        SearchResult(["a", "b"], np.array([2.0, 1.0]))
    r = SearchResult(["a", "b"], np.array([1.0, 2.0]))
    assert r.distances.dtype == np.float32


# ---------------------------------------------------------------------------
# flat


def test_flat_matches_brute_force(corpus, flat):
    X, ids, queries = corpus
    results = flat.search_batch(queries, 10)
    for q, r in zip(queries, results):
        want_ids, want_d = oracle_topk(X, ids, q, 10)
        assert r.neighbor_ids == want_ids
        assert np.array_equal(r.distances, want_d)


def test_flat_self_query_first(corpus, flat):
    X, ids, _ = corpus
    r = flat.search_batch(X[37], 3)[0]
    assert r.neighbor_ids[0] == ids[37]
    assert r.distances[0] == 0.0


def test_flat_truncation_over_size():
    X = np.eye(3)
    r = build_flat(X, ["a", "b", "c"]).search_batch(np.zeros(3), 10)[0]
    assert r.truncated
    assert len(r.neighbor_ids) == 3


def test_flat_tie_break_by_id():
    X = np.array([[1.0, 0.0], [1.0, 0.0], [0.5, 0.0]])
    r = build_flat(X, ["zz", "aa", "mm"]).search_batch(np.zeros(2), 3)[0]
    assert r.neighbor_ids == ["mm", "aa", "zz"]


def test_flat_insert_then_search(corpus):
    X, ids, _ = corpus
    idx = build_flat(X[:50], ids[:50])
    v = np.full(16, 99.0)
    idx.insert(v, "far-away")
    r = idx.search_batch(v, 1)[0]
    assert r.neighbor_ids == ["far-away"]
    assert r.distances[0] == 0.0
    with pytest.raises(InputError):
        idx.insert(v, "far-away")
    with pytest.raises(InputError):
        idx.insert(np.zeros(3), "short")


def test_build_rejects_bad_inputs():
    with pytest.raises(InputError):
        build_flat(np.empty((0, 4)), [])
    with pytest.raises(InputError):
        build_flat(np.zeros((2, 4)), ["a"])
    with pytest.raises(InputError):
        build_flat(np.zeros((2, 4)), ["a", "a"])
    with pytest.raises(InputError):
        build_flat(np.array([[np.nan, 0.0]]), ["a"])


# ---------------------------------------------------------------------------
# ivf


def test_ivf_single_cluster_equals_flat(corpus, flat):
    X, ids, queries = corpus
    ivf = build_ivf(X, ids, num_clusters=1, nprobe=1)
    for a, b in zip(ivf.search_batch(queries, 10), flat.search_batch(queries, 10)):
        assert results_equal(a, b)


def test_ivf_full_probe_equals_flat(corpus, flat):
    X, ids, queries = corpus
    ivf = build_ivf(X, ids, num_clusters=20, seed=3)
    got = ivf.search_batch(queries, 10, nprobe=20)
    want = flat.search_batch(queries, 10)
    for a, b in zip(got, want):
        assert results_equal(a, b)


def test_ivf_dispatch_full_probe_equals_flat(corpus, flat):
    X, ids, queries = corpus
    ivf = build_ivf(X, ids, num_clusters=10, seed=3)
    got = search(ivf, queries, 5, nprobe=10)
    want = flat.search_batch(queries, 5)
    for a, b in zip(got, want):
        assert a.neighbor_ids == b.neighbor_ids


def test_ivf_partition_is_total(corpus):
    X, ids, _ = corpus
    ivf = build_ivf(X, ids, num_clusters=15, seed=0)
    slots = sorted(s for lst in ivf.lists for s in lst)
    assert slots == list(range(len(X)))


def test_ivf_too_many_clusters():
    with pytest.raises(ConfigError):
        build_ivf(np.zeros((5, 2)), list("abcde"), num_clusters=6)


def test_ivf_default_nprobe():
    assert default_nprobe(128) == 16
    assert default_nprobe(4) == 1
    ivf = build_ivf(np.random.default_rng(0).normal(size=(100, 4)),
                    [f"i{k}" for k in range(100)], num_clusters=16)
    assert ivf.nprobe == 2


def test_ivf_insert_lands_in_a_list(corpus):
    X, ids, _ = corpus
    ivf = build_ivf(X[:100], ids[:100], num_clusters=8, seed=1)
    v = X[0] + 0.01
    ivf.insert(v, "new-point")
    assert len(ivf) == 101
    assert sum(len(lst) for lst in ivf.lists) == 101
    r = ivf.search_batch(v, 1, nprobe=8)[0]
    assert r.neighbor_ids == ["new-point"]


def test_ivf_nprobe_validation(corpus):
    X, ids, _ = corpus
    ivf = build_ivf(X[:100], ids[:100], num_clusters=8)
    with pytest.raises(ConfigError):
        ivf.search_batch(X[:2], 3, nprobe=0)


# ---------------------------------------------------------------------------
# pq


def test_pq_dim_divisibility():
    with pytest.raises(ConfigError):
        build_pq(np.zeros((10, 10)), [f"i{k}" for k in range(10)], num_chunks=3)


def test_pq_small_corpus_reconstructs_exactly():
    # With fewer vectors than codebook entries, every vector becomes its own
    # centroid, so encode/decode is lossless and self-queries return 0.
    rng = np.random.default_rng(9)
    X = rng.normal(size=(50, 8))
    ids = [f"p{k:02d}" for k in range(50)]
    pq = build_pq(X, ids, num_chunks=2, seed=2)
    codes = pq.encode(X)
    assert np.allclose(pq.decode(codes), X, atol=1e-12)
    r = pq.search_batch(X[11], 1)[0]
    assert r.neighbor_ids == ["p11"]
    assert r.distances[0] == 0.0


def test_pq_distances_match_decoded_oracle(corpus):
    # Asymmetric-distance search must equal brute force over decoded vectors.
    X, ids, queries = corpus
    pq = build_pq(X[:600], ids[:600], num_chunks=4, seed=7)
    decoded = pq.decode(pq.codes)
    for q, r in zip(queries[:5], pq.search_batch(queries[:5], 10)):
        want_ids, want_d = oracle_topk(decoded, ids[:600], q, 10)
        assert r.neighbor_ids == want_ids
        assert np.allclose(r.distances, want_d, rtol=1e-6)


def test_pq_insert(corpus):
    X, ids, _ = corpus
    pq = build_pq(X[:100], ids[:100], num_chunks=4, seed=0)
    pq.insert(X[0], "clone-of-0")
    assert len(pq) == 101
    r = pq.search_batch(X[0], 2)[0]
    assert set(r.neighbor_ids) == {ids[0], "clone-of-0"}


# ---------------------------------------------------------------------------
# hnsw


def test_hnsw_single_vector():
    idx = build_hnsw(np.array([[1.0, 2.0]]), ["only"], M=4)
    assert idx.entry == 0
    r = idx.search_batch(np.zeros(2), 1)[0]
    assert r.neighbor_ids == ["only"]
    idx.audit()


def test_hnsw_invariants_hold(hnsw):
    hnsw.audit()


def test_hnsw_full_beam_is_exact(corpus, flat, hnsw):
    X, ids, queries = corpus
    got = hnsw.search_batch(queries, 10, ef_search=len(X))
    want = flat.search_batch(queries, 10)
    for a, b in zip(got, want):
        assert results_equal(a, b)


def test_hnsw_dispatch_full_beam_is_exact(corpus, flat, hnsw):
    X, ids, queries = corpus
    got = search(hnsw, queries, 10, ef_search=len(X))
    want = flat.search_batch(queries, 10)
    for a, b in zip(got, want):
        assert a.neighbor_ids == b.neighbor_ids


def test_hnsw_default_beam_recall(corpus, flat, hnsw):
    _, _, queries = corpus
    got = hnsw.search_batch(queries, 10)
    want = flat.search_batch(queries, 10)
    hits = sum(
        len(set(a.neighbor_ids) & set(b.neighbor_ids)) for a, b in zip(got, want)
    )
    assert hits / (10 * len(queries)) >= 0.9


def test_hnsw_same_seed_same_results(corpus):
    X, ids, queries = corpus
    a = build_hnsw(X[:400], ids[:400], M=8, seed=11)
    b = build_hnsw(X[:400], ids[:400], M=8, seed=11)
    for ra, rb in zip(a.search_batch(queries, 5), b.search_batch(queries, 5)):
        assert results_equal(ra, rb)


def test_hnsw_batch_equals_sequential(corpus, hnsw):
    _, _, queries = corpus
    batched = hnsw.search_batch(queries, 5)
    single = [hnsw.search_batch(q, 5)[0] for q in queries]
    for a, b in zip(batched, single):
        assert results_equal(a, b)


def test_hnsw_self_query(corpus, hnsw):
    X, ids, _ = corpus
    r = hnsw.search_batch(X[123], 1)[0]
    assert r.neighbor_ids == [ids[123]]
    assert r.distances[0] == 0.0


def test_hnsw_truncation(corpus):
    X, ids, _ = corpus
    idx = build_hnsw(X[:5], ids[:5], M=4)
    r = idx.search_batch(X[0], 10)[0]
    assert r.truncated
    assert len(r.neighbor_ids) == 5


def test_hnsw_insert_then_self_retrieve(corpus):
    X, ids, _ = corpus
    idx = build_hnsw(X[:200], ids[:200], M=8, seed=2)
    v = X[0] + 50.0
    idx.insert(v, "novel")
    idx.audit()
    r = idx.search_batch(v, 1)[0]
    assert r.neighbor_ids == ["novel"]
    assert r.distances[0] == 0.0
    with pytest.raises(InputError):
        idx.insert(v, "novel")


def test_hnsw_rejects_bad_params(corpus):
    X, ids, _ = corpus
    with pytest.raises(ConfigError):
        build_hnsw(X[:10], ids[:10], M=1)
    with pytest.raises(ConfigError):
        build_hnsw(X[:10], ids[:10], M=4, ef_construction=0)


def test_hnsw_concurrent_search_deterministic(corpus, hnsw):
    _, _, queries = corpus
    serial = hnsw.search_batch(queries, 5)
    with ThreadPoolExecutor(max_workers=8) as pool:
        parallel = list(pool.map(lambda q: hnsw.search_batch(q, 5)[0], queries))
    for a, b in zip(serial, parallel):
        assert results_equal(a, b)


def test_hnsw_concurrent_readers_and_writer(corpus):
    X, ids, _ = corpus
    idx = build_hnsw(X[:300], ids[:300], M=8, seed=4)
    rng = np.random.default_rng(0)
    extra = rng.normal(size=(20, 16))
    errors = []

    def reader():
        try:
            for _ in range(30):
                idx.search_batch(X[:4], 3)
        except Exception as exc:  # pragma: no cover - failure path
            errors.append(exc)

    with ThreadPoolExecutor(max_workers=5) as pool:
        futures = [pool.submit(reader) for _ in range(4)]
        for j, v in enumerate(extra):
            idx.insert(v, f"w{j:02d}")
        for f in futures:
            f.result()
    assert not errors
    assert len(idx) == 320
    idx.audit()


# ---------------------------------------------------------------------------
# persistence


@pytest.mark.parametrize("method", ["flat", "ivf12", "pq4", "hnsw8"])
def test_save_load_round_trip(corpus, tmp_path, method):
    X, ids, queries = corpus
    idx = build_index(method, X[:300], ids[:300], seed=6)
    before = search(idx, queries, 5)
    path = str(tmp_path / "index.npz")
    save_index(idx, path)
    loaded = load_index(path)
    assert loaded.ids == idx.ids
    after = search(loaded, queries, 5)
    for a, b in zip(before, after):
        assert results_equal(a, b)


def test_hnsw_insert_after_load_matches(corpus, tmp_path):
    # The saved generator state makes post-load inserts identical to inserts
    # on the original object.
    X, ids, queries = corpus
    idx = build_hnsw(X[:300], ids[:300], M=8, seed=6)
    path = str(tmp_path / "index.npz")
    save_index(idx, path)
    loaded = load_index(path)
    v = X[999] + 3.0
    idx.insert(v, "added")
    loaded.insert(v, "added")
    for a, b in zip(idx.search_batch(queries, 5), loaded.search_batch(queries, 5)):
        assert results_equal(a, b)


def test_load_rejects_truncated_file(corpus, tmp_path):
    X, ids, _ = corpus
    path = str(tmp_path / "index.npz")
    save_index(build_flat(X[:50], ids[:50]), path)
    data = open(path, "rb").read()
    with open(path, "wb") as fh:
        fh.write(data[: len(data) // 2])
    with pytest.raises(IndexLoadError):
        load_index(path)


def test_load_rejects_missing_file(tmp_path):
    with pytest.raises(IndexLoadError):
        load_index(str(tmp_path / "nope.npz"))


def test_load_rejects_version_mismatch(corpus, tmp_path, monkeypatch):
    X, ids, _ = corpus
    path = str(tmp_path / "index.npz")
    monkeypatch.setattr(index_storage, "INDEX_FORMAT_VERSION", "v0")
    save_index(build_flat(X[:10], ids[:10]), path)
    monkeypatch.undo()
    with pytest.raises(IndexLoadError):
        load_index(path)


# ---------------------------------------------------------------------------
# expansion


@pytest.fixture(scope="module")
def expansion_scenarios():
    cfg = SyntheticConfig(num_scenarios=110, duration_s=1.0, seed=77)
    return generate_synthetic(cfg)


def test_expand_in_distribution_is_noop(corpus, tmp_path, expansion_scenarios):
    X, ids, _ = corpus
    idx = build_hnsw(X[:100], ids[:100], M=8, seed=0)
    store = ScenarioStore(str(tmp_path / "store.jsonl"))
    grew = expand(idx, store, expansion_scenarios[0], X[0], threshold=10.0)
    assert not grew
    assert len(idx) == 100
    assert len(store) == 0


def test_expand_admits_and_self_retrieves(corpus, tmp_path, expansion_scenarios):
    X, ids, _ = corpus
    idx = build_hnsw(X[:100], ids[:100], M=8, seed=0)
    store = ScenarioStore(str(tmp_path / "store.jsonl"))
    scn = expansion_scenarios[1]
    far = X[0] + 100.0
    grew = expand(idx, store, scn, far, threshold=10.0)
    assert grew
    assert scn.scenario_id in store
    r = idx.search_batch(far, 1)[0]
    assert r.neighbor_ids == [scn.scenario_id]
    assert r.distances[0] == 0.0


def test_expand_failed_append_leaves_index_unchanged(
    corpus, tmp_path, expansion_scenarios
):
    X, ids, _ = corpus
    idx = build_hnsw(X[:100], ids[:100], M=8, seed=0)
    store = ScenarioStore(str(tmp_path / "store.jsonl"))
    scn = expansion_scenarios[2]
    store.append(scn)
    with pytest.raises(DataError):
        expand(idx, store, scn, X[0] + 100.0, threshold=10.0)
    assert len(idx) == 100


def test_expand_decisions_match_flat_oracle(corpus, tmp_path, expansion_scenarios):
    # 100 prompts at threshold 10; the oracle tracks the growing corpus with
    # plain float64 minimum distances.
    X, ids, _ = corpus
    rng = np.random.default_rng(123)
    idx = build_hnsw(X[:300], ids[:300], M=8, seed=1)
    store = ScenarioStore(str(tmp_path / "store.jsonl"))
    oracle_rows = [X[:300]]
    for t in range(100):
        scn = expansion_scenarios[3 + t]
        # Offset a corpus point by a radius straddling the threshold so both
        # outcomes occur.
        step = rng.normal(size=16)
        step *= rng.uniform(0.0, 20.0) / np.linalg.norm(step)
        v = X[rng.integers(300)] + step
        want = np.sqrt(
            ((np.vstack(oracle_rows) - v) ** 2).sum(axis=1)
        ).min() > 10.0
        got = expand(idx, store, scn, v, threshold=10.0)
        assert got == want
        if want:
            oracle_rows.append(v[None, :])
    assert len(idx) == 300 + sum(len(r) for r in oracle_rows[1:])
