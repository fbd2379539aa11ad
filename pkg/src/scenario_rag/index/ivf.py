"""Inverted-file index: coarse k-means partition, probe-limited search."""
from __future__ import annotations

from typing import Optional

import numpy as np

from ..errors import ConfigError, InputError
from .base import (
    GrowableRows,
    RWLock,
    SearchResult,
    as_query_matrix,
    make_id_rank,
    rank_candidates,
    validate_build_inputs,
)
from .kmeans import assign_clusters, kmeans_fit


def default_nprobe(num_clusters: int) -> int:
    return max(1, num_clusters // 8)


class IvfIndex:
    kind = "ivf"

    def __init__(
        self,
        vectors: np.ndarray,
        ids: list[str],
        centroids: np.ndarray,
        nprobe: int,
    ):
        X = validate_build_inputs(vectors, ids)
        self.centroids = np.asarray(centroids, dtype=np.float64)
        if self.centroids.shape[1] != X.shape[1]:
            raise InputError("centroid dimension mismatch")
        self.nprobe = nprobe
        self._rows = GrowableRows.from_matrix(X)
        self.ids = list(ids)
        self.id_rank = make_id_rank(self.ids)
        self.dim = X.shape[1]
        labels = assign_clusters(X, self.centroids)
        self.lists: list[list[int]] = [[] for _ in range(len(self.centroids))]
        for slot, lab in enumerate(labels):
            self.lists[lab].append(slot)
        self._grouped = None
        self.lock = RWLock()

    def __len__(self) -> int:
        return self._rows.n

    @property
    def num_clusters(self) -> int:
        return len(self.centroids)

    @property
    def vectors(self) -> np.ndarray:
        return self._rows.view()

    def insert(self, vector: np.ndarray, scenario_id: str) -> None:
        vector = np.asarray(vector, dtype=np.float64).reshape(-1)
        if vector.shape != (self.dim,):
            raise InputError(f"vector must have dimension {self.dim}")
        if scenario_id in set(self.ids):
            raise InputError(f"duplicate id {scenario_id!r}")
        with self.lock.write():
            slot = self._rows.append(vector)
            self.ids.append(scenario_id)
            self.id_rank = make_id_rank(self.ids)
            label = int(assign_clusters(vector[None, :], self.centroids)[0])
            self.lists[label].append(slot)
            self._grouped = None

    def _grouped_view(self):
        """Per-cluster contiguous blocks plus slot maps and squared norms.

        Rebuilt lazily after inserts; building under the read lock is a
        benign race (the result is identical whichever reader wins).
        """
        if self._grouped is None:
            X = self.vectors
            blocks, slot_maps, sq = [], [], []
            for members in self.lists:
                slots = np.asarray(members, dtype=np.int64)
                block = (
                    np.ascontiguousarray(X[slots])
                    if len(slots)
                    else np.empty((0, self.dim))
                )
                blocks.append(block)
                slot_maps.append(slots)
                sq.append((block * block).sum(axis=1))
            self._grouped = (blocks, slot_maps, sq)
        return self._grouped

    def search_batch(
        self, queries, k: int, nprobe: Optional[int] = None
    ) -> list[SearchResult]:
        """Probe the nearest clusters per query, cluster-major for speed.

        Work is grouped by cluster so each block is scanned once per batch
        with a dense matmul; the expanded-form distances only shortlist
        (with a tie margin), and survivors are re-scored by direct
        differences exactly like the full-scan index.
        """
        Q = as_query_matrix(queries, self.dim)
        if nprobe is None:
            nprobe = self.nprobe
        if nprobe < 1:
            raise ConfigError("nprobe must be >= 1")
        probes = min(nprobe, self.num_clusters)
        with self.lock.read():
            X = self.vectors
            n_q = len(Q)
            blocks, slot_maps, block_sq = self._grouped_view()
            sizes = np.array([len(b) for b in blocks], dtype=np.int64)
            c_dists = (
                (Q * Q).sum(axis=1)[:, None]
                + (self.centroids**2).sum(axis=1)[None, :]
                - 2.0 * (Q @ self.centroids.T)
            )
            if probes < self.num_clusters:
                probe_sets = np.argpartition(c_dists, probes - 1, axis=1)[:, :probes]
                totals = sizes[probe_sets].sum(axis=1)
            else:
                probe_sets = np.broadcast_to(
                    np.arange(self.num_clusters), (n_q, self.num_clusters)
                )
                totals = np.full(n_q, int(sizes.sum()), dtype=np.int64)
            probing: list[list[int]] = [[] for _ in range(self.num_clusters)]
            for qi in range(n_q):
                for c in probe_sets[qi]:
                    probing[c].append(qi)

            q_sq = (Q * Q).sum(axis=1)
            pools: list[list[np.ndarray]] = [[] for _ in range(n_q)]
            for c, qlist in enumerate(probing):
                m = len(blocks[c])
                if m == 0 or not qlist:
                    continue
                qidx = np.asarray(qlist, dtype=np.int64)
                row = (
                    q_sq[qidx][:, None]
                    + block_sq[c][None, :]
                    - 2.0 * (Q[qidx] @ blocks[c].T)
                )
                kc = min(k, m)
                kth = np.partition(row, kc - 1, axis=1)[:, kc - 1]
                mask = row <= (kth + 1e-4 * (1.0 + np.abs(kth)))[:, None]
                cols = np.nonzero(mask)[1]
                counts = mask.sum(axis=1)
                for qi, chunk in zip(
                    qidx, np.split(slot_maps[c][cols], np.cumsum(counts)[:-1])
                ):
                    pools[qi].append(chunk)

            out: list[SearchResult] = []
            for qi in range(n_q):
                if not pools[qi]:
                    out.append(SearchResult([], np.empty(0, np.float32), True))
                    continue
                slots = np.concatenate(pools[qi])
                exact = np.sqrt(((X[slots] - Q[qi]) ** 2).sum(axis=1))
                k_eff = min(k, int(totals[qi]))
                top_slots, dists = rank_candidates(slots, exact, self.id_rank, k_eff)
                out.append(
                    SearchResult(
                        neighbor_ids=[self.ids[s] for s in top_slots],
                        distances=dists,
                        truncated=k > int(totals[qi]),
                    )
                )
        return out


def build_ivf(
    vectors,
    ids,
    num_clusters: int,
    seed: int = 0,
    nprobe: Optional[int] = None,
) -> IvfIndex:
    X = validate_build_inputs(vectors, ids)
    if num_clusters > len(X):
        raise ConfigError(
            f"num_clusters {num_clusters} exceeds corpus size {len(X)}"
        )
    train_cap = max(4096, 64 * num_clusters)
    centroids = kmeans_fit(X, num_clusters, seed=seed, train_cap=train_cap)
    if nprobe is None:
        nprobe = default_nprobe(num_clusters)
    if nprobe < 1:
        raise ConfigError("nprobe must be >= 1")
    return IvfIndex(X, ids, centroids, nprobe)
