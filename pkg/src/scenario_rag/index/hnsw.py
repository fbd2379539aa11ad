"""Hierarchical navigable small-world graph index.

Levels are drawn geometrically with multiplier 1/ln(M); insertion descends
greedily through the upper layers, then runs a beam search of width
ef_construction on each layer at or below the node's level, connects to up
to M neighbors chosen by the diversity heuristic (a candidate is kept when
it is closer to the query than to any already-kept neighbor, with pruned
candidates refilled nearest-first), and re-prunes any neighbor list that
overflows its cap (2M on layer 0, M above). Search and insertion share the
same beam kernel; all hot loops are numba-compiled and release the GIL.

Determinism: levels come from a seeded generator, insertion order is the
input order, and every heap comparison breaks distance ties by slot, so a
given (vectors, ids, seed) always builds the same graph.
"""
from __future__ import annotations

import math
from typing import Optional

import numpy as np
from numba import njit

from ..errors import ConfigError, InputError
from .base import (
    RWLock,
    SearchResult,
    as_query_matrix,
    make_id_rank,
    rank_candidates,
    validate_build_inputs,
)

DEFAULT_EF_CONSTRUCTION = 200
DEFAULT_EF_SEARCH = 64
MAX_LEVEL = 24

_JIT = dict(cache=True, nogil=True)


@njit(**_JIT)
def _dist_to(X, slot, q):
    s = 0.0
    for t in range(q.shape[0]):
        diff = X[slot, t] - q[t]
        s += diff * diff
    return math.sqrt(s)


@njit(**_JIT)
def _dist_between(X, a, b):
    s = 0.0
    for t in range(X.shape[1]):
        diff = X[a, t] - X[b, t]
        s += diff * diff
    return math.sqrt(s)


@njit(**_JIT)
def _cand_push(hd, hs, size, d, s):
    """Min-heap push keyed by (distance, slot)."""
    i = size
    hd[i] = d
    hs[i] = s
    while i > 0:
        p = (i - 1) >> 1
        if hd[p] > hd[i] or (hd[p] == hd[i] and hs[p] > hs[i]):
            hd[p], hd[i] = hd[i], hd[p]
            hs[p], hs[i] = hs[i], hs[p]
            i = p
        else:
            break
    return size + 1


@njit(**_JIT)
def _cand_pop(hd, hs, size):
    d = hd[0]
    s = hs[0]
    size -= 1
    hd[0] = hd[size]
    hs[0] = hs[size]
    i = 0
    while True:
        l = 2 * i + 1
        r = l + 1
        smallest = i
        if l < size and (
            hd[l] < hd[smallest] or (hd[l] == hd[smallest] and hs[l] < hs[smallest])
        ):
            smallest = l
        if r < size and (
            hd[r] < hd[smallest] or (hd[r] == hd[smallest] and hs[r] < hs[smallest])
        ):
            smallest = r
        if smallest == i:
            break
        hd[i], hd[smallest] = hd[smallest], hd[i]
        hs[i], hs[smallest] = hs[smallest], hs[i]
        i = smallest
    return d, s, size


@njit(**_JIT)
def _res_push(hd, hs, size, d, s):
    """Max-heap push keyed by (distance, slot); root is the worst result."""
    i = size
    hd[i] = d
    hs[i] = s
    while i > 0:
        p = (i - 1) >> 1
        if hd[p] < hd[i] or (hd[p] == hd[i] and hs[p] < hs[i]):
            hd[p], hd[i] = hd[i], hd[p]
            hs[p], hs[i] = hs[i], hs[p]
            i = p
        else:
            break
    return size + 1


@njit(**_JIT)
def _res_pop(hd, hs, size):
    d = hd[0]
    s = hs[0]
    size -= 1
    hd[0] = hd[size]
    hs[0] = hs[size]
    i = 0
    while True:
        l = 2 * i + 1
        r = l + 1
        largest = i
        if l < size and (
            hd[l] > hd[largest] or (hd[l] == hd[largest] and hs[l] > hs[largest])
        ):
            largest = l
        if r < size and (
            hd[r] > hd[largest] or (hd[r] == hd[largest] and hs[r] > hs[largest])
        ):
            largest = r
        if largest == i:
            break
        hd[i], hd[largest] = hd[largest], hd[i]
        hs[i], hs[largest] = hs[largest], hs[i]
        i = largest
    return d, s, size


@njit(**_JIT)
def _search_layer(
    X, q, level, ef,
    adj0, cnt0, adjU, cntU, upper_start,
    visited, epoch,
    cd, cs, rd, rs, init_s, n_init,
):
    """Beam search on one layer from the given entry slots.

    Returns the result-heap size; rd/rs hold up to ef nearest slots in
    max-heap order.
    """
    csize = 0
    rsize = 0
    for t in range(n_init):
        s = init_s[t]
        if visited[s] == epoch:
            continue
        visited[s] = epoch
        d = _dist_to(X, s, q)
        csize = _cand_push(cd, cs, csize, d, s)
        if rsize < ef:
            rsize = _res_push(rd, rs, rsize, d, s)
        elif d < rd[0] or (d == rd[0] and s < rs[0]):
            _, _, rsize = _res_pop(rd, rs, rsize)
            rsize = _res_push(rd, rs, rsize, d, s)
    while csize > 0:
        d, s, csize = _cand_pop(cd, cs, csize)
        if rsize >= ef and (d > rd[0] or (d == rd[0] and s > rs[0])):
            break
        if level == 0:
            for t in range(cnt0[s]):
                nb = adj0[s, t]
                if visited[nb] != epoch:
                    visited[nb] = epoch
                    nd = _dist_to(X, nb, q)
                    if rsize < ef:
                        csize = _cand_push(cd, cs, csize, nd, nb)
                        rsize = _res_push(rd, rs, rsize, nd, nb)
                    elif nd < rd[0] or (nd == rd[0] and nb < rs[0]):
                        csize = _cand_push(cd, cs, csize, nd, nb)
                        _, _, rsize = _res_pop(rd, rs, rsize)
                        rsize = _res_push(rd, rs, rsize, nd, nb)
        else:
            row = upper_start[s] + level - 1
            for t in range(cntU[row]):
                nb = adjU[row, t]
                if visited[nb] != epoch:
                    visited[nb] = epoch
                    nd = _dist_to(X, nb, q)
                    if rsize < ef:
                        csize = _cand_push(cd, cs, csize, nd, nb)
                        rsize = _res_push(rd, rs, rsize, nd, nb)
                    elif nd < rd[0] or (nd == rd[0] and nb < rs[0]):
                        csize = _cand_push(cd, cs, csize, nd, nb)
                        _, _, rsize = _res_pop(rd, rs, rsize)
                        rsize = _res_push(rd, rs, rsize, nd, nb)
    return rsize


@njit(**_JIT)
def _drain_sorted(rd, rs, rsize, out_d, out_s):
    """Empty the result heap into ascending (distance, slot) order."""
    n = rsize
    i = n - 1
    while rsize > 0:
        d, s, rsize = _res_pop(rd, rs, rsize)
        out_d[i] = d
        out_s[i] = s
        i -= 1
    return n


@njit(**_JIT)
def _select_heuristic(X, wd, ws, n_cand, limit, sel_s, disc_d, disc_s):
    """Diversity selection over ascending candidates.

    Keeps a candidate when it is closer to the query point than to every
    already-kept neighbor; pruned candidates refill remaining slots
    nearest-first.
    """
    nsel = 0
    ndisc = 0
    for t in range(n_cand):
        if nsel >= limit:
            break
        c = ws[t]
        dc = wd[t]
        keep = True
        for u in range(nsel):
            if _dist_between(X, c, sel_s[u]) < dc:
                keep = False
                break
        if keep:
            sel_s[nsel] = c
            nsel += 1
        else:
            disc_d[ndisc] = dc
            disc_s[ndisc] = c
            ndisc += 1
    t = 0
    while nsel < limit and t < ndisc:
        sel_s[nsel] = disc_s[t]
        nsel += 1
        t += 1
    return nsel


@njit(**_JIT)
def _insertion_sort(d, s, n):
    for i in range(1, n):
        dv = d[i]
        sv = s[i]
        j = i - 1
        while j >= 0 and (d[j] > dv or (d[j] == dv and s[j] > sv)):
            d[j + 1] = d[j]
            s[j + 1] = s[j]
            j -= 1
        d[j + 1] = dv
        s[j + 1] = sv


@njit(**_JIT)
def _add_link(
    X, e, new_nb, cap, level,
    adj0, cnt0, adjU, cntU, upper_start,
    scratch_d, scratch_s, psel_s, pdisc_d, pdisc_s,
):
    """Append new_nb to e's list at `level`, re-pruning on overflow."""
    if level == 0:
        cnt = cnt0[e]
        if cnt < cap:
            adj0[e, cnt] = new_nb
            cnt0[e] = cnt + 1
            return
        m = 0
        for t in range(cnt):
            s = adj0[e, t]
            scratch_s[m] = s
            scratch_d[m] = _dist_between(X, e, s)
            m += 1
        scratch_s[m] = new_nb
        scratch_d[m] = _dist_between(X, e, new_nb)
        m += 1
        _insertion_sort(scratch_d, scratch_s, m)
        nsel = _select_heuristic(X, scratch_d, scratch_s, m, cap, psel_s, pdisc_d, pdisc_s)
        for t in range(nsel):
            adj0[e, t] = psel_s[t]
        cnt0[e] = nsel
    else:
        row = upper_start[e] + level - 1
        cnt = cntU[row]
        if cnt < cap:
            adjU[row, cnt] = new_nb
            cntU[row] = cnt + 1
            return
        m = 0
        for t in range(cnt):
            s = adjU[row, t]
            scratch_s[m] = s
            scratch_d[m] = _dist_between(X, e, s)
            m += 1
        scratch_s[m] = new_nb
        scratch_d[m] = _dist_between(X, e, new_nb)
        m += 1
        _insertion_sort(scratch_d, scratch_s, m)
        nsel = _select_heuristic(X, scratch_d, scratch_s, m, cap, psel_s, pdisc_d, pdisc_s)
        for t in range(nsel):
            adjU[row, t] = psel_s[t]
        cntU[row] = nsel


@njit(**_JIT)
def _greedy_descend(X, q, cur, from_level, to_level, adjU, cntU, upper_start):
    """Walk to the locally nearest node on each layer above to_level."""
    dcur = _dist_to(X, cur, q)
    lev = from_level
    while lev > to_level:
        improved = True
        while improved:
            improved = False
            row = upper_start[cur] + lev - 1
            for t in range(cntU[row]):
                nb = adjU[row, t]
                nd = _dist_to(X, nb, q)
                if nd < dcur or (nd == dcur and nb < cur):
                    dcur = nd
                    cur = nb
                    improved = True
        lev -= 1
    return cur


@njit(**_JIT)
def _insert_nodes(
    X, levels, upper_start,
    adj0, cnt0, adjU, cntU,
    M, efc, start, end, entry, entry_level,
    visited, cd, cs, rd, rs, wd, ws,
    sel_s, disc_d, disc_s, scratch_d, scratch_s,
    psel_s, pdisc_d, pdisc_s, init_s,
):
    epoch = 0
    for i in range(start, end):
        l = levels[i]
        if entry < 0:
            entry = i
            entry_level = l
            continue
        q = X[i]
        top = l if l < entry_level else entry_level
        cur = _greedy_descend(X, q, entry, entry_level, top, adjU, cntU, upper_start)
        init_s[0] = cur
        n_init = 1
        for lev in range(top, -1, -1):
            epoch += 1
            rsize = _search_layer(
                X, q, lev, efc, adj0, cnt0, adjU, cntU, upper_start,
                visited, epoch, cd, cs, rd, rs, init_s, n_init,
            )
            ncand = _drain_sorted(rd, rs, rsize, wd, ws)
            nsel = _select_heuristic(X, wd, ws, ncand, M, sel_s, disc_d, disc_s)
            cap = 2 * M if lev == 0 else M
            if lev == 0:
                for t in range(nsel):
                    adj0[i, t] = sel_s[t]
                cnt0[i] = nsel
            else:
                row_i = upper_start[i] + lev - 1
                for t in range(nsel):
                    adjU[row_i, t] = sel_s[t]
                cntU[row_i] = nsel
            for t in range(nsel):
                _add_link(
                    X, sel_s[t], i, cap, lev,
                    adj0, cnt0, adjU, cntU, upper_start,
                    scratch_d, scratch_s, psel_s, pdisc_d, pdisc_s,
                )
            for t in range(ncand):
                init_s[t] = ws[t]
            n_init = ncand
        if l > entry_level:
            entry = i
            entry_level = l
    return entry, entry_level


@njit(**_JIT)
def _search_many(
    X, Q, ef,
    adj0, cnt0, adjU, cntU, upper_start,
    entry, entry_level,
    visited, cd, cs, rd, rs, init_s,
    out_d, out_s, out_n,
):
    epoch = 0
    for qi in range(Q.shape[0]):
        q = Q[qi]
        cur = _greedy_descend(X, q, entry, entry_level, 0, adjU, cntU, upper_start)
        epoch += 1
        init_s[0] = cur
        rsize = _search_layer(
            X, q, 0, ef, adj0, cnt0, adjU, cntU, upper_start,
            visited, epoch, cd, cs, rd, rs, init_s, 1,
        )
        out_n[qi] = _drain_sorted(rd, rs, rsize, out_d[qi], out_s[qi])


class HnswIndex:
    kind = "hnsw"

    def __init__(
        self,
        dim: int,
        M: int,
        ef_construction: int = DEFAULT_EF_CONSTRUCTION,
        seed: int = 0,
    ):
        if M < 2:
            raise ConfigError("M must be >= 2")
        if ef_construction < 1:
            raise ConfigError("ef_construction must be >= 1")
        self.dim = dim
        self.M = M
        self.ef_construction = ef_construction
        self.seed = seed
        self._rng = np.random.default_rng(seed)
        self._mult = 1.0 / math.log(M)

        cap = 16
        self.n = 0
        self._X = np.empty((cap, dim))
        self.levels = np.zeros(cap, dtype=np.int32)
        self.upper_start = np.zeros(cap, dtype=np.int64)
        self.adj0 = np.full((cap, 2 * M), -1, dtype=np.int32)
        self.cnt0 = np.zeros(cap, dtype=np.int32)
        ucap = 16
        self.u_n = 0
        self.adjU = np.full((ucap, M), -1, dtype=np.int32)
        self.cntU = np.zeros(ucap, dtype=np.int32)

        self.entry = -1
        self.entry_level = -1
        self.ids: list[str] = []
        self.id_rank = np.empty(0, dtype=np.int64)
        self.lock = RWLock()

    # -- storage management ---------------------------------------------------

    def __len__(self) -> int:
        return self.n

    @property
    def vectors(self) -> np.ndarray:
        return self._X[: self.n]

    def _ensure_node_capacity(self, need: int) -> None:
        cap = len(self._X)
        if need <= cap:
            return
        new_cap = max(need, 2 * cap)
        X = np.empty((new_cap, self.dim))
        X[: self.n] = self._X[: self.n]
        self._X = X
        self.levels = np.resize(self.levels, new_cap)
        self.upper_start = np.resize(self.upper_start, new_cap)
        adj0 = np.full((new_cap, 2 * self.M), -1, dtype=np.int32)
        adj0[: self.n] = self.adj0[: self.n]
        self.adj0 = adj0
        cnt0 = np.zeros(new_cap, dtype=np.int32)
        cnt0[: self.n] = self.cnt0[: self.n]
        self.cnt0 = cnt0

    def _ensure_upper_capacity(self, need: int) -> None:
        cap = len(self.adjU)
        if need <= cap:
            return
        new_cap = max(need, 2 * cap)
        adjU = np.full((new_cap, self.M), -1, dtype=np.int32)
        adjU[: self.u_n] = self.adjU[: self.u_n]
        self.adjU = adjU
        cntU = np.zeros(new_cap, dtype=np.int32)
        cntU[: self.u_n] = self.cntU[: self.u_n]
        self.cntU = cntU

    def _draw_levels(self, count: int) -> np.ndarray:
        u = self._rng.random(count)
        levels = np.floor(-np.log1p(-u) * self._mult).astype(np.int32)
        return np.minimum(levels, MAX_LEVEL)

    def _insert_block(self, X_new: np.ndarray, ids_new: list[str]) -> None:
        """Append a block of nodes and wire them into the graph."""
        count = len(X_new)
        start = self.n
        self._ensure_node_capacity(start + count)
        levels = self._draw_levels(count)
        self.levels[start : start + count] = levels
        starts = self.u_n + np.concatenate([[0], np.cumsum(levels)[:-1]])
        self.upper_start[start : start + count] = starts
        self._ensure_upper_capacity(self.u_n + int(levels.sum()))
        self.u_n += int(levels.sum())
        self._X[start : start + count] = X_new
        self.adj0[start : start + count] = -1
        self.cnt0[start : start + count] = 0
        self.n = start + count
        self.ids.extend(ids_new)
        self.id_rank = make_id_rank(self.ids)

        n = self.n
        efc = self.ef_construction
        M = self.M
        self.entry, self.entry_level = _insert_nodes(
            self._X[:n], self.levels[:n], self.upper_start[:n],
            self.adj0[:n], self.cnt0[:n], self.adjU[: max(self.u_n, 1)],
            self.cntU[: max(self.u_n, 1)],
            M, efc, start, n, self.entry, self.entry_level,
            np.zeros(n, dtype=np.int64),
            np.empty(n + efc + 8), np.empty(n + efc + 8, dtype=np.int32),
            np.empty(efc + 1), np.empty(efc + 1, dtype=np.int32),
            np.empty(efc), np.empty(efc, dtype=np.int32),
            np.empty(M, dtype=np.int32),
            np.empty(efc), np.empty(efc, dtype=np.int32),
            np.empty(2 * M + 2), np.empty(2 * M + 2, dtype=np.int32),
            np.empty(2 * M + 1, dtype=np.int32),
            np.empty(2 * M + 1), np.empty(2 * M + 1, dtype=np.int32),
            np.empty(max(efc, 1), dtype=np.int32),
        )

    def insert(self, vector: np.ndarray, scenario_id: str) -> None:
        vector = np.asarray(vector, dtype=np.float64).reshape(-1)
        if vector.shape != (self.dim,):
            raise InputError(f"vector must have dimension {self.dim}")
        if scenario_id in set(self.ids):
            raise InputError(f"duplicate id {scenario_id!r}")
        with self.lock.write():
            self._insert_block(vector[None, :], [scenario_id])

    # -- search ---------------------------------------------------------------

    def search_batch(
        self, queries, k: int, ef_search: Optional[int] = None
    ) -> list[SearchResult]:
        Q = as_query_matrix(queries, self.dim)
        if self.n == 0:
            raise InputError("index is empty")
        with self.lock.read():
            n = self.n
            truncated = k > n
            k_eff = min(k, n)
            ef = max(ef_search or DEFAULT_EF_SEARCH, k_eff)
            ef = min(ef, n)
            nq = len(Q)
            out_d = np.empty((nq, ef))
            out_s = np.empty((nq, ef), dtype=np.int32)
            out_n = np.empty(nq, dtype=np.int32)
            _search_many(
                self._X[:n], Q, ef,
                self.adj0[:n], self.cnt0[:n],
                self.adjU[: max(self.u_n, 1)], self.cntU[: max(self.u_n, 1)],
                self.upper_start[:n],
                self.entry, self.entry_level,
                np.zeros(n, dtype=np.int64),
                np.empty(n + ef + 8), np.empty(n + ef + 8, dtype=np.int32),
                np.empty(ef + 1), np.empty(ef + 1, dtype=np.int32),
                np.empty(1, dtype=np.int32),
                out_d, out_s, out_n,
            )
            results = []
            for qi in range(nq):
                cnt = out_n[qi]
                slots = out_s[qi, :cnt].astype(np.int64)
                dists = out_d[qi, :cnt]
                kq = min(k_eff, cnt)
                top_slots, top_d = rank_candidates(slots, dists, self.id_rank, kq)
                results.append(
                    SearchResult(
                        neighbor_ids=[self.ids[s] for s in top_slots],
                        distances=top_d,
                        truncated=truncated or kq < k,
                    )
                )
        return results

    # -- diagnostics ----------------------------------------------------------

    def audit(self) -> None:
        """Check the structural invariants; raises on violation."""
        n = self.n
        if n == 0:
            return
        if not (0 <= self.entry < n):
            raise InputError("entry point out of range")
        if self.levels[: n].max() != self.entry_level:
            raise InputError("entry point is not at the top layer")
        for i in range(n):
            c = self.cnt0[i]
            if c > 2 * self.M:
                raise InputError(f"layer-0 list of node {i} exceeds 2M")
            nbs = self.adj0[i, :c]
            if len(set(nbs.tolist())) != c or np.any(nbs < 0) or np.any(nbs >= n):
                raise InputError(f"bad layer-0 adjacency at node {i}")
            if np.any(nbs == i):
                raise InputError(f"self-loop at node {i}")
            for lev in range(1, self.levels[i] + 1):
                row = self.upper_start[i] + lev - 1
                c = self.cntU[row]
                if c > self.M:
                    raise InputError(f"layer-{lev} list of node {i} exceeds M")
                nbs = self.adjU[row, :c]
                if len(set(nbs.tolist())) != c or np.any(nbs < 0) or np.any(nbs >= n):
                    raise InputError(f"bad layer-{lev} adjacency at node {i}")
                if np.any(self.levels[nbs] < lev):
                    raise InputError(f"layer-{lev} neighbor below its layer at {i}")


def build_hnsw(
    vectors,
    ids,
    M: int = 32,
    ef_construction: int = DEFAULT_EF_CONSTRUCTION,
    seed: int = 0,
) -> HnswIndex:
    X = validate_build_inputs(vectors, ids)
    index = HnswIndex(X.shape[1], M, ef_construction, seed)
    index._insert_block(X, list(ids))
    return index
