"""Product-quantization index: per-chunk codebooks, asymmetric distances."""
from __future__ import annotations

import numpy as np

from ..errors import ConfigError, InputError
from .base import (
    RWLock,
    SearchResult,
    as_query_matrix,
    make_id_rank,
    rank_candidates,
    validate_build_inputs,
)
from .kmeans import assign_clusters, kmeans_fit

CODEBOOK_SIZE = 256
_TRAIN_CAP = 16384


class PqIndex:
    kind = "pq"

    def __init__(self, codebooks: np.ndarray, codes: np.ndarray, ids: list[str]):
        self.codebooks = np.asarray(codebooks, dtype=np.float64)  # (m, C, sub)
        if self.codebooks.ndim != 3:
            raise InputError("codebooks must be (chunks, entries, subdim)")
        self.codes = np.asarray(codes, dtype=np.uint8)  # (n, m)
        if self.codes.shape[1] != self.codebooks.shape[0]:
            raise InputError("code length must equal chunk count")
        if len(ids) != len(self.codes):
            raise InputError("ids must align with codes")
        self.ids = list(ids)
        self.id_rank = make_id_rank(self.ids)
        self.num_chunks = self.codebooks.shape[0]
        self.sub_dim = self.codebooks.shape[2]
        self.dim = self.num_chunks * self.sub_dim
        self.lock = RWLock()

    def __len__(self) -> int:
        return len(self.codes)

    def encode(self, vectors: np.ndarray) -> np.ndarray:
        X = np.asarray(vectors, dtype=np.float64)
        if X.ndim == 1:
            X = X[None, :]
        if X.shape[1] != self.dim:
            raise InputError(f"vectors must have dimension {self.dim}")
        return _encode(X, self.codebooks)

    def decode(self, codes: np.ndarray) -> np.ndarray:
        codes = np.asarray(codes, dtype=np.uint8)
        if codes.ndim == 1:
            codes = codes[None, :]
        out = np.empty((len(codes), self.dim))
        for c in range(self.num_chunks):
            out[:, c * self.sub_dim : (c + 1) * self.sub_dim] = self.codebooks[c][
                codes[:, c]
            ]
        return out

    def insert(self, vector: np.ndarray, scenario_id: str) -> None:
        if scenario_id in set(self.ids):
            raise InputError(f"duplicate id {scenario_id!r}")
        with self.lock.write():
            code = self.encode(vector)
            self.codes = np.vstack([self.codes, code])
            self.ids.append(scenario_id)
            self.id_rank = make_id_rank(self.ids)

    def search_batch(self, queries, k: int) -> list[SearchResult]:
        Q = as_query_matrix(queries, self.dim)
        with self.lock.read():
            truncated = k > len(self)
            k_eff = min(k, len(self))
            slots = np.arange(len(self))
            chunk_idx = np.arange(self.num_chunks)
            out: list[SearchResult] = []
            for q in Q:
                # Asymmetric distance: per-chunk lookup tables of squared
                # distances from the query sub-vector to every codebook entry.
                lut = np.empty((self.num_chunks, self.codebooks.shape[1]))
                for c in range(self.num_chunks):
                    sub = q[c * self.sub_dim : (c + 1) * self.sub_dim]
                    lut[c] = ((self.codebooks[c] - sub) ** 2).sum(axis=1)
                sq = lut[chunk_idx[None, :], self.codes].sum(axis=1)
                d = np.sqrt(np.maximum(sq, 0.0))
                top_slots, dists = rank_candidates(slots, d, self.id_rank, k_eff)
                out.append(
                    SearchResult(
                        neighbor_ids=[self.ids[s] for s in top_slots],
                        distances=dists,
                        truncated=truncated,
                    )
                )
        return out


def _encode(X: np.ndarray, codebooks: np.ndarray) -> np.ndarray:
    num_chunks, _, sub = codebooks.shape
    codes = np.empty((len(X), num_chunks), dtype=np.uint8)
    for c in range(num_chunks):
        codes[:, c] = assign_clusters(
            X[:, c * sub : (c + 1) * sub], codebooks[c]
        ).astype(np.uint8)
    return codes


def build_pq(vectors, ids, num_chunks: int, seed: int = 0) -> PqIndex:
    X = validate_build_inputs(vectors, ids)
    dim = X.shape[1]
    if num_chunks < 1 or dim % num_chunks != 0:
        raise ConfigError(
            f"dim {dim} must be divisible by num_chunks {num_chunks}"
        )
    sub = dim // num_chunks
    entries = min(CODEBOOK_SIZE, len(X))
    children = np.random.SeedSequence(seed).spawn(num_chunks)
    codebooks = np.empty((num_chunks, entries, sub))
    for c, child in enumerate(children):
        codebooks[c] = kmeans_fit(
            X[:, c * sub : (c + 1) * sub], entries, seed=child, train_cap=_TRAIN_CAP
        )
    return PqIndex(codebooks, _encode(X, codebooks), list(ids))
