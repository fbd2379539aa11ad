"""Seeded k-means with k-means++ initialization and a fixed iteration count.

Shared by the inverted-file coarse quantizer and the product-quantization
codebooks. Training optionally runs on a uniform subsample to bound cost at
large corpus sizes; assignment always covers every vector.
"""
from __future__ import annotations

from typing import Optional

import numpy as np

from ..errors import ConfigError

KMEANS_ITERS = 25
_CHUNK = 4096


def _sq_dists_to(X: np.ndarray, centers: np.ndarray) -> np.ndarray:
    """Squared Euclidean distances (len(X), len(centers)), chunk-safe."""
    out = np.empty((len(X), len(centers)))
    c_sq = (centers * centers).sum(axis=1)
    for lo in range(0, len(X), _CHUNK):
        chunk = X[lo : lo + _CHUNK]
        sq = (chunk * chunk).sum(axis=1)[:, None] + c_sq[None, :]
        sq -= 2.0 * (chunk @ centers.T)
        np.maximum(sq, 0.0, out=sq)
        out[lo : lo + _CHUNK] = sq
    return out


def _plus_plus_init(train: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    centers = np.empty((k, train.shape[1]))
    centers[0] = train[int(rng.integers(len(train)))]
    closest = ((train - centers[0]) ** 2).sum(axis=1)
    for j in range(1, k):
        total = closest.sum()
        if total <= 0:
            pick = int(rng.integers(len(train)))
        else:
            pick = int(rng.choice(len(train), p=closest / total))
        centers[j] = train[pick]
        np.minimum(closest, ((train - centers[j]) ** 2).sum(axis=1), out=closest)
    return centers


def kmeans_fit(
    X: np.ndarray,
    k: int,
    seed: "int | np.random.SeedSequence" = 0,
    iters: int = KMEANS_ITERS,
    train_cap: Optional[int] = None,
) -> np.ndarray:
    """Fit k centroids; deterministic for a given seed.

    Runs exactly `iters` Lloyd iterations after k-means++ seeding. A cluster
    that loses all members keeps its previous centroid.
    """
    X = np.asarray(X, dtype=np.float64)
    n = len(X)
    if k < 1 or k > n:
        raise ConfigError(f"k must be in [1, {n}], got {k}")
    rng = np.random.default_rng(seed)
    if train_cap is not None and n > train_cap:
        train = X[np.sort(rng.choice(n, size=train_cap, replace=False))]
    else:
        train = X

    centers = _plus_plus_init(train, k, rng)
    for _ in range(iters):
        assign = np.argmin(_sq_dists_to(train, centers), axis=1)
        for j in range(k):
            members = train[assign == j]
            if len(members):
                centers[j] = members.mean(axis=0)
    return centers


def assign_clusters(X: np.ndarray, centers: np.ndarray) -> np.ndarray:
    """Nearest-centroid label for every row of X."""
    labels = np.empty(len(X), dtype=np.int64)
    for lo in range(0, len(X), _CHUNK):
        chunk = X[lo : lo + _CHUNK]
        labels[lo : lo + _CHUNK] = np.argmin(_sq_dists_to(chunk, centers), axis=1)
    return labels
