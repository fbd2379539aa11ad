"""Scenario distance: per-frame optimal matching plus time warping.

The distance between two scenarios is computed in two stages. First, each
frame pair gets a scene cost: an exact balanced assignment between the two
frames' vehicle sets after ego-centric normalization, with dummy padding for
unequal sizes. Second, dynamic time warping runs over the frame-pair cost
matrix and the accumulated cost is normalized by warping-path length, so
scenarios of different durations stay comparable.

Hot paths (assignment, scene cost, the DTW sweep) are numba-compiled; the
public functions accept plain scenario objects and handle compilation to the
flat arrays the kernels need.
"""
from __future__ import annotations

import hashlib
import json
import math
import os
import zlib
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass
from typing import Optional

import numpy as np
from numba import njit

from .errors import ConfigError, DataError, InputError
from .scenarios import AtomScenario, SceneGraph

MATRIX_VERSION = "v1"

_JIT = dict(cache=True, nogil=True)


@dataclass(frozen=True)
class SceneCostConfig:
    """Ground-cost weights for matching one vehicle against another."""

    w_pos: float = 1.0  # per meter of position offset
    w_vel: float = 0.5  # per m/s of velocity offset
    w_head: float = 2.0  # per radian of heading offset
    type_mismatch_penalty: float = 10.0
    unmatched_penalty: float = 20.0

    def __post_init__(self):
        if min(self.w_pos, self.w_vel, self.w_head, self.type_mismatch_penalty) < 0:
            raise ConfigError("cost weights must be nonnegative")
        if self.unmatched_penalty <= 0:
            raise ConfigError("unmatched_penalty must be positive")


@dataclass(frozen=True)
class DtwConfig:
    """Warping parameters; band_radius=None explores the full frame grid."""

    band_radius: Optional[int] = None

    def __post_init__(self):
        if self.band_radius is not None and self.band_radius < 0:
            raise ConfigError("band_radius must be >= 0")


@dataclass
class CompiledScenario:
    """Per-frame vehicle features in ego-centric coordinates.

    features[f, i] = (x, y, vx, vy, heading) of vehicle i in frame f after
    translating the ego to the origin and rotating its heading to zero.
    Rows beyond counts[f] are padding.
    """

    features: np.ndarray  # (frames, max_vehicles, 5) float64
    lanes: np.ndarray  # (frames, max_vehicles) int64; -1 = unknown lane
    counts: np.ndarray  # (frames,) int64

    @property
    def num_frames(self) -> int:
        return len(self.counts)


def _lane_code(lane_id: Optional[str]) -> int:
    if lane_id is None:
        return -1
    return zlib.crc32(lane_id.encode("utf-8"))


def _frame_rows(frame: SceneGraph, ego_id: Optional[str]):
    """Vehicle feature rows for one frame, ego-normalized when ego_id given."""
    vehicles = frame.vehicles()
    if not vehicles:
        raise InputError(f"frame at t={frame.timestamp} has no vehicle nodes")
    if ego_id is None:
        ex = ey = theta = 0.0
    else:
        ego = frame.node(ego_id)
        if ego.kind != "vehicle":
            raise InputError(f"ego {ego_id!r} is not a vehicle node")
        ex, ey = ego.position
        theta = ego.heading
    c, s = math.cos(theta), math.sin(theta)
    rows = np.empty((len(vehicles), 5))
    lanes = np.empty(len(vehicles), dtype=np.int64)
    for i, v in enumerate(vehicles):
        dx, dy = v.position[0] - ex, v.position[1] - ey
        vx, vy = v.velocity
        rows[i, 0] = c * dx + s * dy
        rows[i, 1] = -s * dx + c * dy
        rows[i, 2] = c * vx + s * vy
        rows[i, 3] = -s * vx + c * vy
        h = math.fmod(v.heading - theta + math.pi, 2.0 * math.pi)
        if h <= 0.0:
            h += 2.0 * math.pi
        rows[i, 4] = h - math.pi
        lanes[i] = _lane_code(v.lane_id)
    return rows, lanes


def compile_scenario(scenario: AtomScenario) -> CompiledScenario:
    """Flatten a scenario into the padded arrays the distance kernels use."""
    per_frame = [_frame_rows(f, scenario.ego_id) for f in scenario.frames]
    nframes = len(per_frame)
    max_v = max(len(rows) for rows, _ in per_frame)
    features = np.zeros((nframes, max_v, 5))
    lanes = np.full((nframes, max_v), -1, dtype=np.int64)
    counts = np.empty(nframes, dtype=np.int64)
    for f, (rows, lane_row) in enumerate(per_frame):
        n = len(rows)
        features[f, :n] = rows
        lanes[f, :n] = lane_row
        counts[f] = n
    return CompiledScenario(features, lanes, counts)


@njit(**_JIT)
def _solve_assignment(C):
    """Minimum-cost perfect matching on a square cost matrix.

    Augmenting-path shortest-path method with dual potentials, O(n^3).
    Returns the total cost of the optimal assignment.
    """
    n = C.shape[0]
    INF = 1e18
    u = np.zeros(n + 1)
    v = np.zeros(n + 1)
    match = np.zeros(n + 1, np.int64)  # column j -> assigned row (1-based, 0 free)
    way = np.zeros(n + 1, np.int64)
    for i in range(1, n + 1):
        match[0] = i
        j0 = 0
        minv = np.full(n + 1, INF)
        used = np.zeros(n + 1, np.bool_)
        while True:
            used[j0] = True
            i0 = match[j0]
            delta = INF
            j1 = -1
            for j in range(1, n + 1):
                if not used[j]:
                    cur = C[i0 - 1, j - 1] - u[i0] - v[j]
                    if cur < minv[j]:
                        minv[j] = cur
                        way[j] = j0
                    if minv[j] < delta:
                        delta = minv[j]
                        j1 = j
            for j in range(n + 1):
                if used[j]:
                    u[match[j]] += delta
                    v[j] -= delta
                else:
                    minv[j] -= delta
            j0 = j1
            if match[j0] == 0:
                break
        while True:
            j1 = way[j0]
            match[j0] = match[j1]
            j0 = j1
            if j0 == 0:
                break
    total = 0.0
    for j in range(1, n + 1):
        total += C[match[j] - 1, j - 1]
    return total


@njit(**_JIT)
def _scene_cost(fa, la, na, fb, lb, nb, w_pos, w_vel, w_head, type_pen, unmatched_pen):
    """Assignment cost between two frames' vehicle rows, averaged over slots."""
    m = na if na > nb else nb
    C = np.empty((m, m))
    for i in range(m):
        for j in range(m):
            if i >= na or j >= nb:
                C[i, j] = unmatched_pen
            else:
                dx = fa[i, 0] - fb[j, 0]
                dy = fa[i, 1] - fb[j, 1]
                dvx = fa[i, 2] - fb[j, 2]
                dvy = fa[i, 3] - fb[j, 3]
                dh = (fa[i, 4] - fb[j, 4] + math.pi) % (2.0 * math.pi)
                if dh <= 0.0:
                    dh += 2.0 * math.pi
                dh -= math.pi
                c = (
                    w_pos * math.sqrt(dx * dx + dy * dy)
                    + w_vel * math.sqrt(dvx * dvx + dvy * dvy)
                    + w_head * abs(dh)
                )
                if la[i] >= 0 and lb[j] >= 0 and la[i] != lb[j]:
                    c += type_pen
                C[i, j] = c
    return _solve_assignment(C) / m


@njit(**_JIT)
def _dtw_kernel(
    feat_x, lanes_x, counts_x, feat_y, lanes_y, counts_y,
    w_pos, w_vel, w_head, type_pen, unmatched_pen, band,
):
    """DTW over the frame-pair scene-cost matrix.

    Returns (accumulated cost, path length) of the minimum-cost warping
    path; among equal-cost paths the shortest defines the length, which
    makes the normalized result deterministic. band < 0 disables banding.
    """
    nx = counts_x.shape[0]
    ny = counts_y.shape[0]
    INF = 1e18
    cost = np.full((nx, ny), INF)
    plen = np.zeros((nx, ny), np.int64)
    for i in range(nx):
        jlo = 0
        jhi = ny - 1
        if band >= 0:
            jlo = max(0, i - band)
            jhi = min(ny - 1, i + band)
        for j in range(jlo, jhi + 1):
            d = _scene_cost(
                feat_x[i], lanes_x[i], counts_x[i],
                feat_y[j], lanes_y[j], counts_y[j],
                w_pos, w_vel, w_head, type_pen, unmatched_pen,
            )
            if i == 0 and j == 0:
                cost[0, 0] = d
                plen[0, 0] = 1
                continue
            bc = INF
            bl = np.int64(0)
            if i > 0 and cost[i - 1, j] < INF:
                bc = cost[i - 1, j]
                bl = plen[i - 1, j]
            if j > 0 and cost[i, j - 1] < INF:
                if cost[i, j - 1] < bc or (cost[i, j - 1] == bc and plen[i, j - 1] < bl):
                    bc = cost[i, j - 1]
                    bl = plen[i, j - 1]
            if i > 0 and j > 0 and cost[i - 1, j - 1] < INF:
                if cost[i - 1, j - 1] < bc or (
                    cost[i - 1, j - 1] == bc and plen[i - 1, j - 1] < bl
                ):
                    bc = cost[i - 1, j - 1]
                    bl = plen[i - 1, j - 1]
            if bc < INF:
                cost[i, j] = bc + d
                plen[i, j] = bl + 1
    return cost[nx - 1, ny - 1], plen[nx - 1, ny - 1]


def scene_distance(
    a: SceneGraph,
    b: SceneGraph,
    cfg: Optional[SceneCostConfig] = None,
    *,
    ego_a: Optional[str] = None,
    ego_b: Optional[str] = None,
) -> float:
    """Matching cost between two frames' vehicle sets, averaged per slot.

    When ego ids are given, each frame is first normalized into its own
    ego's coordinates (ego at origin, heading zero), which makes the cost
    invariant under rigid motion of a whole frame. Without them the frames
    are compared in their native coordinates.
    """
    cfg = cfg or SceneCostConfig()
    fa, la = _frame_rows(a, ego_a)
    fb, lb = _frame_rows(b, ego_b)
    return float(
        _scene_cost(
            fa, la, len(fa), fb, lb, len(fb),
            cfg.w_pos, cfg.w_vel, cfg.w_head,
            cfg.type_mismatch_penalty, cfg.unmatched_penalty,
        )
    )


def _check_band(nx: int, ny: int, dcfg: DtwConfig) -> int:
    if dcfg.band_radius is None:
        return -1
    if dcfg.band_radius < abs(nx - ny):
        raise ConfigError(
            f"band_radius {dcfg.band_radius} cannot connect corners of a "
            f"{nx}x{ny} frame grid; need at least {abs(nx - ny)}"
        )
    return dcfg.band_radius


def compiled_distance(
    cx: CompiledScenario,
    cy: CompiledScenario,
    scfg: Optional[SceneCostConfig] = None,
    dcfg: Optional[DtwConfig] = None,
) -> float:
    """graph_dtw_distance on pre-compiled scenarios (skips re-flattening)."""
    scfg = scfg or SceneCostConfig()
    dcfg = dcfg or DtwConfig()
    band = _check_band(cx.num_frames, cy.num_frames, dcfg)
    total, length = _dtw_kernel(
        cx.features, cx.lanes, cx.counts,
        cy.features, cy.lanes, cy.counts,
        scfg.w_pos, scfg.w_vel, scfg.w_head,
        scfg.type_mismatch_penalty, scfg.unmatched_penalty,
        band,
    )
    return float(total / length)


def graph_dtw_distance(
    x: AtomScenario,
    y: AtomScenario,
    scfg: Optional[SceneCostConfig] = None,
    dcfg: Optional[DtwConfig] = None,
) -> float:
    """Warping-normalized scenario distance; symmetric and zero on identity."""
    return compiled_distance(compile_scenario(x), compile_scenario(y), scfg, dcfg)


def pairwise_matrix(
    scenarios: list[AtomScenario],
    scfg: Optional[SceneCostConfig] = None,
    dcfg: Optional[DtwConfig] = None,
    max_workers: Optional[int] = None,
) -> np.ndarray:
    """Symmetric matrix of scenario distances with a zero diagonal.

    Pairs are distributed over a thread pool; the kernels release the GIL so
    this scales with cores, and output is deterministic regardless of
    scheduling because every pair owns its own cells.
    """
    if not scenarios:
        raise InputError("pairwise_matrix needs at least one scenario")
    scfg = scfg or SceneCostConfig()
    dcfg = dcfg or DtwConfig()
    compiled = [compile_scenario(s) for s in scenarios]
    n = len(compiled)
    D = np.zeros((n, n))
    pairs = [(i, j) for i in range(n) for j in range(i + 1, n)]

    def run_pair(pair):
        i, j = pair
        try:
            return i, j, compiled_distance(compiled[i], compiled[j], scfg, dcfg)
        except Exception as exc:
            raise DataError(f"distance failed for pair ({i}, {j}): {exc}") from exc

    workers = max_workers or os.cpu_count() or 1
    if workers <= 1 or len(pairs) < 2:
        results = map(run_pair, pairs)
        for i, j, d in results:
            D[i, j] = D[j, i] = d
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            for i, j, d in pool.map(run_pair, pairs, chunksize=64):
                D[i, j] = D[j, i] = d
    return D


def configs_hash(scfg: SceneCostConfig, dcfg: DtwConfig) -> str:
    """Short stable digest of the distance configuration, for provenance."""
    payload = json.dumps(
        {"scene_cost": asdict(scfg), "dtw": asdict(dcfg)}, sort_keys=True
    )
    return hashlib.sha256(payload.encode("utf-8")).hexdigest()[:16]


def save_matrix(D: np.ndarray, path: str, config_hash: str = "") -> None:
    """Write a distance matrix as little-endian float32, row-major, plus a
    JSON sidecar (`<path>.json`) recording its shape and config digest."""
    D = np.asarray(D)
    if D.ndim != 2 or D.shape[0] != D.shape[1]:
        raise InputError(f"matrix must be square, got shape {D.shape}")
    with open(path, "wb") as fh:
        fh.write(np.ascontiguousarray(D, dtype="<f4").tobytes())
    sidecar = {
        "version": MATRIX_VERSION,
        "n": int(D.shape[0]),
        "dtype": "<f4",
        "layout": "row-major",
        "config_hash": config_hash,
    }
    with open(path + ".json", "w", encoding="utf-8") as fh:
        json.dump(sidecar, fh, indent=2)
        fh.write("\n")


def load_matrix(path: str) -> tuple[np.ndarray, dict]:
    """Read a matrix written by save_matrix; returns (matrix, sidecar dict)."""
    with open(path + ".json", "r", encoding="utf-8") as fh:
        meta = json.load(fh)
    if meta.get("version") != MATRIX_VERSION:
        raise DataError(f"unsupported matrix version {meta.get('version')!r}")
    n = int(meta["n"])
    raw = np.fromfile(path, dtype="<f4")
    if raw.size != n * n:
        raise DataError(
            f"matrix file {path} has {raw.size} values, sidecar says {n}x{n}"
        )
    return raw.reshape(n, n).astype(np.float64), meta
