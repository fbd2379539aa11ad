"""Shared plumbing for the search indexes: results, ordering, locking.

All index types report float32 distances and resolve distance ties by the
lexicographically smaller scenario id, so identical corpora produce
identical results whatever the index internals do.
"""
from __future__ import annotations

import threading
from contextlib import contextmanager
from dataclasses import dataclass, field

import numpy as np

from ..errors import InputError


@dataclass
class SearchResult:
    """Top-K neighbors for one query, nearest first."""

    neighbor_ids: list[str]
    distances: np.ndarray
    truncated: bool = False

    def __post_init__(self):
        self.distances = np.asarray(self.distances, dtype=np.float32)
        if len(self.neighbor_ids) != len(self.distances):
            raise InputError("ids and distances must align")
        if len(set(self.neighbor_ids)) != len(self.neighbor_ids):
            raise InputError("neighbor ids must be distinct")
        if np.any(np.diff(self.distances) < 0):
            raise InputError("distances must be nondecreasing")


def make_id_rank(ids: list[str]) -> np.ndarray:
    """Rank of each slot's id in lexicographic order (the tie-break key)."""
    order = sorted(range(len(ids)), key=lambda i: ids[i])
    rank = np.empty(len(ids), dtype=np.int64)
    for r, slot in enumerate(order):
        rank[slot] = r
    return rank


def validate_build_inputs(vectors, ids) -> np.ndarray:
    X = np.asarray(vectors, dtype=np.float64)
    if X.ndim != 2 or X.shape[0] == 0:
        raise InputError("vectors must be a nonempty 2-d array")
    if not np.all(np.isfinite(X)):
        raise InputError("vectors must be finite")
    if len(ids) != X.shape[0]:
        raise InputError("ids must align with vectors")
    if len(set(ids)) != len(ids):
        raise InputError("duplicate ids in index build")
    return X


def as_query_matrix(queries, dim: int) -> np.ndarray:
    Q = np.asarray(queries, dtype=np.float64)
    if Q.ndim == 1:
        Q = Q[None, :]
    if Q.ndim != 2 or Q.shape[1] != dim:
        raise InputError(f"queries must have dimension {dim}, got shape {Q.shape}")
    return Q


def rank_candidates(
    slots: np.ndarray, dists: np.ndarray, id_rank: np.ndarray, k: int
) -> tuple[np.ndarray, np.ndarray]:
    """Order candidate slots by (float32 distance, id rank) and keep k.

    Distances come in as float64; the reported (and compared) values are
    their float32 rounding, which makes equal-by-storage distances tie and
    fall back to the id ordering.
    """
    d32 = dists.astype(np.float32)
    if k < len(slots):
        # Everything at or below the k-th smallest distance can still make
        # the cut once ties are broken by id; keep all of them.
        part = np.argpartition(d32, k - 1)[:k]
        dk = d32[part].max()
        keep = np.flatnonzero(d32 <= dk)
        slots, d32 = slots[keep], d32[keep]
    order = np.lexsort((id_rank[slots], d32))[:k]
    return slots[order], d32[order]


class RWLock:
    """Many concurrent readers, one exclusive writer.

    Searches take the read side so a whole query batch runs against a
    consistent index; inserts take the write side.
    """

    def __init__(self):
        self._cond = threading.Condition()
        self._readers = 0
        self._writing = False

    @contextmanager
    def read(self):
        with self._cond:
            while self._writing:
                self._cond.wait()
            self._readers += 1
        try:
            yield
        finally:
            with self._cond:
                self._readers -= 1
                if self._readers == 0:
                    self._cond.notify_all()

    @contextmanager
    def write(self):
        with self._cond:
            while self._writing or self._readers > 0:
                self._cond.wait()
            self._writing = True
        try:
            yield
        finally:
            with self._cond:
                self._writing = False
                self._cond.notify_all()


@dataclass
class GrowableRows:
    """Append-only float64 row store with amortized doubling."""

    dim: int
    data: np.ndarray = field(init=False)
    n: int = field(init=False, default=0)

    def __post_init__(self):
        self.data = np.empty((16, self.dim))

    @classmethod
    def from_matrix(cls, X: np.ndarray) -> "GrowableRows":
        g = cls(dim=X.shape[1])
        g.data = np.array(X, dtype=np.float64, copy=True)
        g.n = X.shape[0]
        return g

    def view(self) -> np.ndarray:
        return self.data[: self.n]

    def append(self, row: np.ndarray) -> int:
        if self.n == len(self.data):
            grown = np.empty((max(16, 2 * len(self.data)), self.dim))
            grown[: self.n] = self.data[: self.n]
            self.data = grown
        self.data[self.n] = row
        self.n += 1
        return self.n - 1
