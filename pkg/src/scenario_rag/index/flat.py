"""Exact exhaustive-scan index: the accuracy oracle for every other index."""
from __future__ import annotations

import numpy as np

from ..errors import InputError
from .base import (
    GrowableRows,
    RWLock,
    SearchResult,
    as_query_matrix,
    make_id_rank,
    rank_candidates,
    validate_build_inputs,
)

_QUERY_CHUNK = 256


class FlatIndex:
    kind = "flat"

    def __init__(self, vectors: np.ndarray, ids: list[str]):
        X = validate_build_inputs(vectors, ids)
        self._rows = GrowableRows.from_matrix(X)
        self.ids = list(ids)
        self.id_rank = make_id_rank(self.ids)
        self.dim = X.shape[1]
        self.lock = RWLock()

    def __len__(self) -> int:
        return self._rows.n

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
            self._rows.append(vector)
            self.ids.append(scenario_id)
            self.id_rank = make_id_rank(self.ids)

    def search_batch(self, queries, k: int) -> list[SearchResult]:
        Q = as_query_matrix(queries, self.dim)
        if len(self) == 0:
            raise InputError("index is empty")
        with self.lock.read():
            X = self.vectors
            truncated = k > len(X)
            k_eff = min(k, len(X))
            x_sq = (X * X).sum(axis=1)
            out: list[SearchResult] = []
            for lo in range(0, len(Q), _QUERY_CHUNK):
                chunk = Q[lo : lo + _QUERY_CHUNK]
                # Fast shortlist via the expanded form, then exact distances
                # for the shortlist only; the margin covers both the expanded
                # form's cancellation error and float32 rounding at the cut.
                sq = (chunk * chunk).sum(axis=1)[:, None] + x_sq[None, :]
                sq -= 2.0 * (chunk @ X.T)
                np.maximum(sq, 0.0, out=sq)
                for qi, row in enumerate(sq):
                    kth = np.partition(row, k_eff - 1)[k_eff - 1]
                    keep = np.flatnonzero(row <= kth + 1e-4 * (1.0 + kth))
                    exact = np.sqrt(((X[keep] - chunk[qi]) ** 2).sum(axis=1))
                    slots, dists = rank_candidates(keep, exact, self.id_rank, k_eff)
                    out.append(
                        SearchResult(
                            neighbor_ids=[self.ids[s] for s in slots],
                            distances=dists,
                            truncated=truncated,
                        )
                    )
        return out


def build_flat(vectors, ids) -> FlatIndex:
    return FlatIndex(vectors, ids)
