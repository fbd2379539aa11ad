"""Trajectory CSV ingestion: resample to a fixed tick and slice into scenarios.

Rows are grouped per vehicle, linearly resampled onto a shared 0.1 s tick
grid, then cut into fixed-length windows. Every frame gets its relation
edges rebuilt geometrically.
"""
from __future__ import annotations

import csv
import math
import os
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .errors import ConfigError, DataError, SchemaError
from .scenarios import (
    DEFAULT_RELATION_RADIUS,
    AtomScenario,
    NodeState,
    SceneGraph,
    derive_relations,
    wrap_angle,
)

TICK_S = 0.1


@dataclass
class CsvSchema:
    """Column-name mapping for trajectory CSVs."""

    time: str = "time"
    vehicle_id: str = "vehicle_id"
    x: str = "x"
    y: str = "y"
    vx: str = "vx"
    vy: str = "vy"
    heading: str = "heading"
    lane_id: Optional[str] = None
    label: Optional[str] = None
    ego_id: Optional[str] = None  # fixed ego vehicle id; default picks per window

    def required_columns(self) -> list[str]:
        return [self.time, self.vehicle_id, self.x, self.y, self.vx, self.vy, self.heading]


@dataclass
class Slicing:
    window_s: float = 5.0
    stride_s: float = 2.5

    def __post_init__(self):
        if self.window_s <= 0:
            raise ConfigError("window_s must be positive")
        if self.stride_s <= 0:
            raise ConfigError("stride_s must be positive")


@dataclass
class _VehicleSamples:
    """One vehicle's resampled state on the shared tick grid."""

    first_tick: int
    x: np.ndarray
    y: np.ndarray
    vx: np.ndarray
    vy: np.ndarray
    heading: np.ndarray
    lane_ids: list
    label: Optional[str]

    def covers(self, tick: int) -> bool:
        return self.first_tick <= tick < self.first_tick + len(self.x)

    def at(self, tick: int) -> tuple:
        k = tick - self.first_tick
        return (
            self.x[k],
            self.y[k],
            self.vx[k],
            self.vy[k],
            self.heading[k],
            self.lane_ids[k],
        )


def _read_rows(path: str, schema: CsvSchema) -> dict[str, list[dict]]:
    with open(path, "r", encoding="utf-8", newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None:
            raise SchemaError(f"{path}: empty CSV (no header row)")
        missing = [c for c in schema.required_columns() if c not in reader.fieldnames]
        if missing:
            raise SchemaError(f"{path}: missing columns {missing}")
        per_vehicle: dict[str, list[dict]] = {}
        for row in reader:
            per_vehicle.setdefault(row[schema.vehicle_id], []).append(row)
    return per_vehicle


def _resample_vehicle(
    vid: str, rows: list[dict], schema: CsvSchema, t_origin: float
) -> Optional[_VehicleSamples]:
    times = np.array([float(r[schema.time]) for r in rows])
    if np.any(np.diff(times) <= 0):
        raise DataError(f"vehicle {vid!r}: timestamps not strictly increasing")

    # Ticks on the shared grid covered by this vehicle's observations.
    first = int(math.ceil((times[0] - t_origin) / TICK_S - 1e-9))
    last = int(math.floor((times[-1] - t_origin) / TICK_S + 1e-9))
    if last < first:
        return None
    grid = t_origin + np.arange(first, last + 1) * TICK_S

    def col(name):
        return np.array([float(r[name]) for r in rows])

    x = np.interp(grid, times, col(schema.x))
    y = np.interp(grid, times, col(schema.y))
    vx = np.interp(grid, times, col(schema.vx))
    vy = np.interp(grid, times, col(schema.vy))
    heading_raw = np.unwrap(col(schema.heading))
    heading = np.array([wrap_angle(h) for h in np.interp(grid, times, heading_raw)])

    if schema.lane_id is not None and schema.lane_id in rows[0]:
        source_lanes = [r[schema.lane_id] or None for r in rows]
        nearest = np.searchsorted(times, grid, side="left")
        nearest = np.clip(nearest, 0, len(times) - 1)
        lane_ids = [source_lanes[i] for i in nearest]
    else:
        lane_ids = [None] * len(grid)

    label = None
    if schema.label is not None and schema.label in rows[0]:
        label = rows[0][schema.label] or None

    return _VehicleSamples(first, x, y, vx, vy, heading, lane_ids, label)


def ingest_csv(
    path: str,
    schema: CsvSchema,
    slicing: Slicing,
    radius: float = DEFAULT_RELATION_RADIUS,
) -> list[AtomScenario]:
    """Read a trajectory CSV and slice it into fixed-tick scenarios.

    Each window becomes one scenario if some vehicle is present at every tick
    of the window; the ego is that vehicle (the smallest id when several
    qualify, unless the schema pins one). Windows with no such vehicle are
    skipped.
    """
    per_vehicle = _read_rows(path, schema)
    if not per_vehicle:
        raise DataError(f"{path}: no data rows")

    t_origin = min(
        float(rows[0][schema.time]) for rows in per_vehicle.values() if rows
    )
    samples = {}
    for vid, rows in sorted(per_vehicle.items()):
        s = _resample_vehicle(vid, rows, schema, t_origin)
        if s is not None:
            samples[vid] = s
    if not samples:
        raise DataError(f"{path}: no vehicle spans a full tick")

    total_ticks = max(s.first_tick + len(s.x) for s in samples.values())
    window_ticks = int(round(slicing.window_s / TICK_S))
    stride_ticks = max(1, int(round(slicing.stride_s / TICK_S)))

    base = os.path.splitext(os.path.basename(path))[0]
    scenarios = []
    j = 0
    start = 0
    while start + window_ticks <= total_ticks:
        scenario = _window_to_scenario(
            f"{base}-w{j:04d}", samples, schema, t_origin,
            start, window_ticks, radius,
        )
        if scenario is not None:
            scenarios.append(scenario)
        j += 1
        start = j * stride_ticks
    return scenarios


def _window_to_scenario(
    scenario_id: str,
    samples: dict[str, _VehicleSamples],
    schema: CsvSchema,
    t_origin: float,
    start: int,
    window_ticks: int,
    radius: float,
) -> Optional[AtomScenario]:
    ticks = range(start, start + window_ticks)
    full_presence = sorted(
        vid for vid, s in samples.items() if all(s.covers(k) for k in ticks)
    )
    if not full_presence:
        return None
    if schema.ego_id is not None:
        if schema.ego_id not in full_presence:
            return None
        ego = schema.ego_id
    else:
        ego = full_presence[0]

    frames = []
    for k in ticks:
        nodes = []
        for vid, s in samples.items():
            if not s.covers(k):
                continue
            x, y, vx, vy, heading, lane = s.at(k)
            nodes.append(
                NodeState(vid, "vehicle", (x, y), (vx, vy), heading, lane)
            )
        frame = SceneGraph(nodes=nodes, edges=[], timestamp=round(t_origin + k * TICK_S, 6))
        frames.append(derive_relations(frame, radius=radius))

    label = samples[ego].label or "unlabeled"
    ego_last = samples[ego].at(start + window_ticks - 1)
    return AtomScenario(
        scenario_id=scenario_id,
        ego_id=ego,
        interaction_type=label,
        frames=frames,
        goal=(ego_last[0], ego_last[1]),
    )
