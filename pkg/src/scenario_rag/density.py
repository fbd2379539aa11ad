"""Density estimation over embedded scenarios and typical-subset selection.

The corpus is thinned in two moves: scenarios in the sparse tail of the
embedding-space density are all kept (they carry the rare structure), and
the dense remainder is down-sampled with probability inversely proportional
to density. The result is the typical scenario subset used to build the
search index.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .errors import ConfigError, DataError, InputError

MANIFEST_VERSION = "v1"
DEFAULT_REFERENCE_SIZE = 4096
_CHUNK_ROWS = 2048  # bounds the (chunk x reference) distance buffer


@dataclass
class DensityEstimate:
    """Per-scenario densities, aligned index-for-index with `ids`."""

    densities: np.ndarray
    bandwidth: float
    reference_ids: list[str]
    ids: list[str]

    def __post_init__(self):
        self.densities = np.asarray(self.densities, dtype=np.float64)
        if self.bandwidth <= 0:
            raise ConfigError("bandwidth must be positive")
        if np.any(self.densities <= 0) or not np.all(np.isfinite(self.densities)):
            raise InputError("densities must be strictly positive and finite")
        if len(self.ids) != len(self.densities):
            raise InputError("ids must align with densities")


@dataclass
class TsdSubset:
    """Selected typical subset plus the parameters that produced it."""

    retained_ids: list[str]
    threshold: float
    alpha_pct: float
    beta_pct: float
    seed: int
    retained_set: frozenset = field(init=False, repr=False)

    def __post_init__(self):
        self.retained_set = frozenset(self.retained_ids)

    def __contains__(self, scenario_id: str) -> bool:
        return scenario_id in self.retained_set

    def __len__(self) -> int:
        return len(self.retained_ids)


def scott_bandwidth(reference: np.ndarray) -> float:
    """Scott's rule: mean per-dimension std scaled by n^(-1/(d+4))."""
    n, d = reference.shape
    sigma = float(np.sqrt(reference.var(axis=0).mean()))
    return sigma * n ** (-1.0 / (d + 4))


def estimate_density(
    vectors: np.ndarray,
    bandwidth: Optional[float] = None,
    reference_size: int = DEFAULT_REFERENCE_SIZE,
    seed: int = 0,
    ids: Optional[Sequence[str]] = None,
) -> DensityEstimate:
    """Gaussian-kernel density of every vector against a reference subset.

    The reference set is a uniform subsample of size min(N, reference_size);
    below that size the estimate equals the exact all-pairs sum. Densities
    are unnormalized kernel means (the constant factor cancels in both the
    quantile threshold and the inverse-density weights).
    """
    X = np.asarray(vectors, dtype=np.float64)
    if X.ndim != 2 or len(X) < 2:
        raise InputError("need at least 2 vectors of equal dimension")
    n = len(X)
    if ids is None:
        ids = [str(i) for i in range(n)]
    elif len(ids) != n:
        raise InputError("ids must align with vectors")
    ids = list(ids)

    if reference_size < 2:
        raise ConfigError("reference_size must be >= 2")
    if n <= reference_size:
        ref_idx = np.arange(n)
    else:
        rng = np.random.default_rng(seed)
        ref_idx = np.sort(rng.choice(n, size=reference_size, replace=False))
    R = X[ref_idx]

    if bandwidth is None:
        bandwidth = scott_bandwidth(R)
        if bandwidth == 0.0:
            bandwidth = 1.0  # degenerate reference (all points coincide)
    if bandwidth <= 0:
        raise ConfigError("bandwidth must be positive")

    inv = -1.0 / (2.0 * bandwidth * bandwidth)
    ref_sq = (R * R).sum(axis=1)
    densities = np.empty(n)
    for lo in range(0, n, _CHUNK_ROWS):
        chunk = X[lo : lo + _CHUNK_ROWS]
        sq = (chunk * chunk).sum(axis=1)[:, None] + ref_sq[None, :]
        sq -= 2.0 * (chunk @ R.T)
        np.maximum(sq, 0.0, out=sq)
        densities[lo : lo + _CHUNK_ROWS] = np.exp(inv * sq).mean(axis=1)
    # Far outliers can underflow to exactly zero; keep strict positivity.
    np.maximum(densities, np.finfo(np.float64).tiny, out=densities)

    return DensityEstimate(
        densities=densities,
        bandwidth=float(bandwidth),
        reference_ids=[ids[i] for i in ref_idx],
        ids=ids,
    )


def select_tsd(
    est: DensityEstimate,
    alpha_pct: float,
    beta_pct: float,
    seed: int = 0,
    literal_alpha_quantile: bool = False,
) -> TsdSubset:
    """Threshold-and-sample selection of the typical subset.

    The threshold tau is the k-th smallest density with k covering the
    sparsest (100 - alpha_pct)% of the corpus; everything at or below tau is
    retained in full. From the denser remainder, ceil(beta_pct%) are drawn
    by weighted sampling without replacement with weights 1/density.

    With literal_alpha_quantile=True the threshold covers the sparsest
    alpha_pct% instead, which retains most of the corpus for large alpha.
    """
    if not (0 < alpha_pct < 100):
        raise ConfigError("alpha_pct must be in (0, 100)")
    if not (0 <= beta_pct <= 100):
        raise ConfigError("beta_pct must be in [0, 100]")

    p = est.densities
    n = len(p)
    tail_pct = alpha_pct if literal_alpha_quantile else (100.0 - alpha_pct)
    k = min(n, max(1, math.ceil(tail_pct / 100.0 * n)))
    tau = float(np.partition(p, k - 1)[k - 1])

    low_mask = p <= tau
    remainder = np.flatnonzero(~low_mask)
    target = math.ceil(beta_pct / 100.0 * len(remainder))

    if target >= len(remainder):
        sampled = remainder
    elif target == 0:
        sampled = remainder[:0]
    else:
        # Weighted sampling without replacement: draw one exponential per
        # candidate, rank by E_i / weight_i with weight 1/p, keep the
        # smallest keys. Equivalent to the classic u^(1/w) ranking but
        # stable for tiny densities.
        rng = np.random.default_rng(seed)
        keys = rng.exponential(size=len(remainder)) * p[remainder]
        sampled = remainder[np.argpartition(keys, target - 1)[:target]]

    retained_idx = np.sort(np.concatenate([np.flatnonzero(low_mask), sampled]))
    return TsdSubset(
        retained_ids=[est.ids[i] for i in retained_idx],
        threshold=tau,
        alpha_pct=float(alpha_pct),
        beta_pct=float(beta_pct),
        seed=seed,
    )


def save_tsd(tsd: TsdSubset, path: str) -> None:
    payload = {
        "version": MANIFEST_VERSION,
        "alpha_pct": tsd.alpha_pct,
        "beta_pct": tsd.beta_pct,
        "seed": tsd.seed,
        "threshold": tsd.threshold,
        "retained_ids": list(tsd.retained_ids),
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2)
        fh.write("\n")


def load_tsd(path: str) -> TsdSubset:
    with open(path, "r", encoding="utf-8") as fh:
        payload = json.load(fh)
    if payload.get("version") != MANIFEST_VERSION:
        raise DataError(f"unsupported TSD manifest version {payload.get('version')!r}")
    return TsdSubset(
        retained_ids=list(payload["retained_ids"]),
        threshold=float(payload["threshold"]),
        alpha_pct=float(payload["alpha_pct"]),
        beta_pct=float(payload["beta_pct"]),
        seed=int(payload["seed"]),
    )
