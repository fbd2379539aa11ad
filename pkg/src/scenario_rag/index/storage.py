"""Versioned on-disk format for every index kind.

A saved index is a single .npz archive whose ``version`` and ``kind``
fields gate loading; the stored arrays are exact (float64 vectors), so a
load reproduces search results bit-for-bit, and the HNSW generator state
rides along so incremental inserts continue the same random stream.
"""
from __future__ import annotations

import json
from typing import Union

import numpy as np

from ..errors import IndexLoadError
from .base import make_id_rank
from .flat import FlatIndex
from .hnsw import HnswIndex
from .ivf import IvfIndex
from .pq import PqIndex

INDEX_FORMAT_VERSION = "v1"

AnyIndex = Union[FlatIndex, IvfIndex, PqIndex, HnswIndex]


def save_index(index: AnyIndex, path: str) -> None:
    fields: dict = {
        "version": INDEX_FORMAT_VERSION,
        "kind": index.kind,
        "ids_json": json.dumps(index.ids),
    }
    if isinstance(index, FlatIndex):
        fields["vectors"] = index.vectors
    elif isinstance(index, IvfIndex):
        fields["vectors"] = index.vectors
        fields["centroids"] = index.centroids
        fields["nprobe"] = np.int64(index.nprobe)
    elif isinstance(index, PqIndex):
        fields["codebooks"] = index.codebooks
        fields["codes"] = index.codes
    elif isinstance(index, HnswIndex):
        n, u_n = index.n, index.u_n
        fields.update(
            vectors=index.vectors,
            levels=index.levels[:n],
            upper_start=index.upper_start[:n],
            adj0=index.adj0[:n],
            cnt0=index.cnt0[:n],
            adjU=index.adjU[:u_n],
            cntU=index.cntU[:u_n],
            entry=np.int64(index.entry),
            entry_level=np.int64(index.entry_level),
            M=np.int64(index.M),
            ef_construction=np.int64(index.ef_construction),
            seed=np.int64(index.seed),
            rng_json=json.dumps(index._rng.bit_generator.state),
        )
    else:
        raise IndexLoadError(f"cannot save index of type {type(index).__name__}")
    with index.lock.read():
        with open(path, "wb") as fh:
            np.savez(fh, **fields)


def load_index(path: str) -> AnyIndex:
    try:
        with np.load(path, allow_pickle=False) as data:
            version = str(data["version"][()])
            if version != INDEX_FORMAT_VERSION:
                raise IndexLoadError(
                    f"index format {version!r} unsupported (expected "
                    f"{INDEX_FORMAT_VERSION!r})"
                )
            kind = str(data["kind"][()])
            ids = json.loads(str(data["ids_json"][()]))
            if kind == "flat":
                return FlatIndex(data["vectors"], ids)
            if kind == "ivf":
                return IvfIndex(
                    data["vectors"], ids, data["centroids"], int(data["nprobe"][()])
                )
            if kind == "pq":
                return PqIndex(data["codebooks"], data["codes"], ids)
            if kind == "hnsw":
                return _restore_hnsw(data, ids)
            raise IndexLoadError(f"unknown index kind {kind!r}")
    except IndexLoadError:
        raise
    except FileNotFoundError as exc:
        raise IndexLoadError(f"index file not found: {path}") from exc
    except Exception as exc:
        raise IndexLoadError(f"corrupt index file {path}: {exc}") from exc


def _restore_hnsw(data, ids: list) -> HnswIndex:
    X = data["vectors"]
    n = len(X)
    u_n = len(data["adjU"])
    index = HnswIndex(
        X.shape[1],
        int(data["M"][()]),
        int(data["ef_construction"][()]),
        int(data["seed"][()]),
    )
    index._ensure_node_capacity(n)
    index._ensure_upper_capacity(max(u_n, 1))
    index._X[:n] = X
    index.levels[:n] = data["levels"]
    index.upper_start[:n] = data["upper_start"]
    index.adj0[:n] = data["adj0"]
    index.cnt0[:n] = data["cnt0"]
    index.adjU[:u_n] = data["adjU"]
    index.cntU[:u_n] = data["cntU"]
    index.n = n
    index.u_n = u_n
    index.entry = int(data["entry"][()])
    index.entry_level = int(data["entry_level"][()])
    index.ids = list(ids)
    index.id_rank = make_id_rank(index.ids)
    index._rng.bit_generator.state = json.loads(str(data["rng_json"][()]))
    return index
