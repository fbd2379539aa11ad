"""Vector indexes over embedded scenarios: exact Flat plus IVF/PQ/HNSW.

Method strings select an index family and its main parameter in one token
("flat", "ivf128", "pq8", "hnsw32"); :func:`build_index` and :func:`search`
dispatch on them so callers and the command line share one naming scheme.
"""
from __future__ import annotations

import re
from typing import Optional

from ..errors import ConfigError
from .base import RWLock, SearchResult, make_id_rank, rank_candidates
from .expansion import DEFAULT_EXPANSION_THRESHOLD, expand
from .flat import FlatIndex, build_flat
from .hnsw import (
    DEFAULT_EF_CONSTRUCTION,
    DEFAULT_EF_SEARCH,
    HnswIndex,
    build_hnsw,
)
from .ivf import IvfIndex, build_ivf, default_nprobe
from .pq import PqIndex, build_pq
from .storage import INDEX_FORMAT_VERSION, load_index, save_index

_METHOD_RE = re.compile(r"^(flat|ivf|pq|hnsw)(\d+)?$")


def parse_method(method: str) -> tuple[str, Optional[int]]:
    """Split an index method string into (family, parameter).

    "flat" has no parameter; "ivf<k>", "pq<m>", and "hnsw<M>" require one.
    """
    m = _METHOD_RE.match(method.strip().lower())
    if not m:
        raise ConfigError(f"unknown index method {method!r}")
    family, param = m.group(1), m.group(2)
    if family == "flat":
        if param is not None:
            raise ConfigError("flat takes no parameter")
        return "flat", None
    if param is None:
        raise ConfigError(f"method {family!r} needs a parameter, e.g. {family}32")
    return family, int(param)


def build_index(
    method: str,
    vectors,
    ids,
    seed: int = 0,
    ef_construction: int = DEFAULT_EF_CONSTRUCTION,
    nprobe: Optional[int] = None,
):
    family, param = parse_method(method)
    if family == "flat":
        return build_flat(vectors, ids)
    if family == "ivf":
        return build_ivf(vectors, ids, param, seed=seed, nprobe=nprobe)
    if family == "pq":
        return build_pq(vectors, ids, param, seed=seed)
    return build_hnsw(vectors, ids, param, ef_construction=ef_construction, seed=seed)


def search(
    index,
    queries,
    k: int,
    ef_search: Optional[int] = None,
    nprobe: Optional[int] = None,
) -> list[SearchResult]:
    """Top-k batch search with the per-family tuning knob applied."""
    if k < 1:
        raise ConfigError("k must be >= 1")
    if isinstance(index, HnswIndex):
        return index.search_batch(queries, k, ef_search=ef_search)
    if isinstance(index, IvfIndex):
        return index.search_batch(queries, k, nprobe=nprobe)
    return index.search_batch(queries, k)


def method_string(index) -> str:
    """The method token that would rebuild an index of this shape."""
    if isinstance(index, FlatIndex):
        return "flat"
    if isinstance(index, IvfIndex):
        return f"ivf{index.num_clusters}"
    if isinstance(index, PqIndex):
        return f"pq{index.num_chunks}"
    if isinstance(index, HnswIndex):
        return f"hnsw{index.M}"
    raise ConfigError(f"unknown index type {type(index).__name__}")


__all__ = [
    "DEFAULT_EF_CONSTRUCTION",
    "DEFAULT_EF_SEARCH",
    "DEFAULT_EXPANSION_THRESHOLD",
    "FlatIndex",
    "HnswIndex",
    "INDEX_FORMAT_VERSION",
    "IvfIndex",
    "PqIndex",
    "RWLock",
    "SearchResult",
    "build_flat",
    "build_hnsw",
    "build_index",
    "build_ivf",
    "build_pq",
    "default_nprobe",
    "expand",
    "load_index",
    "make_id_rank",
    "method_string",
    "parse_method",
    "rank_candidates",
    "save_index",
    "search",
]
