"""Seeded synthetic scenario generation.

Produces kinematically plausible multi-lane trajectories from three
interaction templates (following, merge, crossing). Output is deterministic
for a given config: each scenario draws from its own child RNG stream, so
the corpus does not change when scenarios are generated lazily or in
parallel.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError
from .scenarios import (
    DEFAULT_RELATION_RADIUS,
    AtomScenario,
    NodeState,
    SceneGraph,
    derive_relations,
)

LANE_WIDTH = 3.5
ROAD_NODE_SPACING = 20.0
ROAD_NODE_RANGE = 60.0

TEMPLATES = ("following", "merge", "crossing")


@dataclass
class SyntheticConfig:
    num_scenarios: int = 100
    lane_count: int = 3
    vehicles_min: int = 3
    vehicles_max: int = 6
    duration_s: float = 5.0
    tick_s: float = 0.1
    templates: tuple[str, ...] = TEMPLATES
    seed: int = 0
    relation_radius: float = DEFAULT_RELATION_RADIUS

    def __post_init__(self):
        if self.lane_count < 1:
            raise ConfigError("lane_count must be >= 1")
        if not (1 <= self.vehicles_min <= self.vehicles_max):
            raise ConfigError("need 1 <= vehicles_min <= vehicles_max")
        if self.duration_s <= 0 or self.tick_s <= 0:
            raise ConfigError("duration_s and tick_s must be positive")
        bad = [t for t in self.templates if t not in TEMPLATES]
        if bad:
            raise ConfigError(f"unknown templates {bad}; valid: {TEMPLATES}")
        if not self.templates:
            raise ConfigError("templates must be nonempty")


def lane_y(lane: int) -> float:
    return lane * LANE_WIDTH


def _finite_difference_velocity(pos: np.ndarray, tick: float) -> np.ndarray:
    """Forward-difference velocities, repeating the last step."""
    vel = np.empty_like(pos)
    vel[:-1] = (pos[1:] - pos[:-1]) / tick
    vel[-1] = vel[-2] if len(pos) > 1 else 0.0
    return vel


def _headings_from_velocity(vx: np.ndarray, vy: np.ndarray, initial: float) -> np.ndarray:
    """Heading tracks the velocity direction; near-zero speed keeps the last one."""
    out = np.empty_like(vx)
    last = initial
    for k in range(len(vx)):
        if math.hypot(vx[k], vy[k]) > 0.3:
            last = math.atan2(vy[k], vx[k])
        out[k] = last
    return out


@dataclass
class _Track:
    """One vehicle's sampled trajectory over the scenario ticks."""

    x: np.ndarray
    y: np.ndarray
    lane_ids: list  # per-tick lane_id (or None)
    vx: np.ndarray = field(init=False)
    vy: np.ndarray = field(init=False)
    heading: np.ndarray = field(init=False)

    def finalize(self, tick: float) -> "_Track":
        self.vx = _finite_difference_velocity(self.x, tick)
        self.vy = _finite_difference_velocity(self.y, tick)
        self.heading = _headings_from_velocity(self.vx, self.vy, initial=0.0)
        return self


def _follow_chain(
    rng: np.random.Generator, n: int, nticks: int, tick: float, lane: int
) -> list[_Track]:
    """Car-following queue in one lane; index 0 is the rear-most vehicle.

    The leader varies speed sinusoidally; each follower runs a proportional
    controller on gap and relative speed, which keeps spacing plausible
    without collisions.
    """
    v_base = rng.uniform(8.0, 14.0)
    period = rng.uniform(4.0, 8.0)
    phase = rng.uniform(0.0, 2 * math.pi)
    gaps = rng.uniform(8.0, 15.0, size=max(n - 1, 0))

    x = np.zeros((n, nticks))
    v = np.full(n, v_base)
    # Front-most vehicle is index n-1; start rear-most at x=0.
    x0 = np.concatenate([[0.0], np.cumsum(gaps)]) if n > 1 else np.array([0.0])
    x[:, 0] = x0
    for k in range(1, nticks):
        t = k * tick
        v_lead = v_base * (1.0 + 0.15 * math.sin(2 * math.pi * t / period + phase))
        v[n - 1] = v_lead
        for i in range(n - 2, -1, -1):
            gap = x[i + 1, k - 1] - x[i, k - 1]
            want = gaps[i]
            acc = 0.4 * (gap - want) + 0.8 * (v[i + 1] - v[i])
            v[i] = max(0.0, v[i] + np.clip(acc, -3.0, 2.0) * tick)
        x[:, k] = x[:, k - 1] + v * tick

    yv = lane_y(lane)
    return [
        _Track(x[i], np.full(nticks, yv), [f"lane{lane}"] * nticks)
        for i in range(n)
    ]


def _straight_track(
    rng: np.random.Generator, nticks: int, tick: float, lane: int, x0: float
) -> _Track:
    speed = rng.uniform(8.0, 14.0)
    times = np.arange(nticks) * tick
    return _Track(
        x0 + speed * times, np.full(nticks, lane_y(lane)), [f"lane{lane}"] * nticks
    )


def _smoothstep(u: np.ndarray) -> np.ndarray:
    u = np.clip(u, 0.0, 1.0)
    return u * u * (3.0 - 2.0 * u)


def _template_following(
    rng: np.random.Generator, n: int, nticks: int, tick: float, lane_count: int
) -> list[_Track]:
    lane = lane_count // 2
    chain = _follow_chain(rng, n, nticks, tick, lane)
    # Ego is the middle of the queue so it has both front and rear neighbors.
    ego_pos = len(chain) // 2
    chain[0], chain[ego_pos] = chain[ego_pos], chain[0]
    return chain


def _template_merge(
    rng: np.random.Generator, n: int, nticks: int, tick: float, lane_count: int
) -> list[_Track]:
    duration = nticks * tick
    times = np.arange(nticks) * tick
    tracks = [_straight_track(rng, nticks, tick, 0, x0=0.0)]  # ego in lane 0

    # Merging vehicle approaches on a ramp below lane 0 and blends in
    # laterally over the middle of the scenario.
    speed = rng.uniform(9.0, 15.0)
    x0 = rng.uniform(-15.0, 10.0)
    t1, t2 = 0.3 * duration, 0.7 * duration
    blend = _smoothstep((times - t1) / (t2 - t1))
    y = -LANE_WIDTH * 1.3 * (1.0 - blend) + lane_y(0) * blend
    lane_ids = [None if b < 1.0 else "lane0" for b in blend]
    tracks.append(_Track(x0 + speed * times, y, lane_ids))

    for i in range(n - 2):
        lane = 1 + (i % max(lane_count - 1, 1))
        lane = min(lane, lane_count - 1)
        tracks.append(
            _straight_track(rng, nticks, tick, lane, x0=rng.uniform(-20.0, 30.0))
        )
    return tracks[:n]


def _template_crossing(
    rng: np.random.Generator, n: int, nticks: int, tick: float, lane_count: int
) -> list[_Track]:
    duration = nticks * tick
    times = np.arange(nticks) * tick
    ego_lane = lane_count // 2
    ego = _straight_track(rng, nticks, tick, ego_lane, x0=0.0)
    tracks = [ego]

    # Crossing vehicle travels along y and passes through the ego's path a
    # couple of seconds after the ego clears the intersection point.
    t_cross = rng.uniform(0.4, 0.6) * duration
    k_cross = int(t_cross / tick)
    x_c = ego.x[min(k_cross, nticks - 1)]
    v_c = rng.uniform(6.0, 12.0) * rng.choice([-1.0, 1.0])
    lead_s = rng.uniform(1.5, 2.5)  # seconds behind the ego at the crossing
    y_at_cross = lane_y(ego_lane) - v_c * lead_s
    y = y_at_cross + v_c * (times - t_cross)
    tracks.append(_Track(np.full(nticks, x_c), y, [None] * nticks))

    for i in range(n - 2):
        lane = i % lane_count
        if lane == ego_lane:
            lane = (lane + 1) % lane_count
        tracks.append(
            _straight_track(rng, nticks, tick, lane, x0=rng.uniform(-25.0, 25.0))
        )
    return tracks[:n]


_TEMPLATE_FNS = {
    "following": _template_following,
    "merge": _template_merge,
    "crossing": _template_crossing,
}


def _road_nodes(lane_count: int, ego_x: float) -> list[NodeState]:
    nodes = []
    lo = math.ceil((ego_x - ROAD_NODE_RANGE) / ROAD_NODE_SPACING)
    hi = math.floor((ego_x + ROAD_NODE_RANGE) / ROAD_NODE_SPACING)
    for lane in range(lane_count):
        for g in range(lo, hi + 1):
            nodes.append(
                NodeState(
                    node_id=f"r-l{lane}-g{g}",
                    kind="road_node",
                    position=(g * ROAD_NODE_SPACING, lane_y(lane)),
                    velocity=(0.0, 0.0),
                    heading=0.0,
                    lane_id=f"lane{lane}",
                )
            )
    return nodes


def _build_scenario(
    scenario_id: str,
    template: str,
    rng: np.random.Generator,
    config: SyntheticConfig,
) -> AtomScenario:
    nticks = int(round(config.duration_s / config.tick_s))
    n = int(rng.integers(config.vehicles_min, config.vehicles_max + 1))
    tracks = _TEMPLATE_FNS[template](rng, n, nticks, config.tick_s, config.lane_count)
    for tr in tracks:
        tr.finalize(config.tick_s)

    frames = []
    for k in range(nticks):
        nodes = [
            NodeState(
                node_id=f"v{i}",
                kind="vehicle",
                position=(tr.x[k], tr.y[k]),
                velocity=(tr.vx[k], tr.vy[k]),
                heading=tr.heading[k],
                lane_id=tr.lane_ids[k],
            )
            for i, tr in enumerate(tracks)
        ]
        nodes.extend(_road_nodes(config.lane_count, tracks[0].x[k]))
        frame = SceneGraph(nodes=nodes, edges=[], timestamp=round(k * config.tick_s, 6))
        frames.append(derive_relations(frame, radius=config.relation_radius))

    ego = tracks[0]
    goal = (
        ego.x[-1] + 20.0 * math.cos(ego.heading[-1]),
        ego.y[-1] + 20.0 * math.sin(ego.heading[-1]),
    )
    return AtomScenario(
        scenario_id=scenario_id,
        ego_id="v0",
        interaction_type=template,
        frames=frames,
        goal=goal,
    )


def generate_synthetic(config: SyntheticConfig) -> list[AtomScenario]:
    """Generate `config.num_scenarios` labeled scenarios, deterministically."""
    children = np.random.SeedSequence(config.seed).spawn(config.num_scenarios)
    scenarios = []
    for k, child in enumerate(children):
        rng = np.random.default_rng(child)
        template = config.templates[int(rng.integers(len(config.templates)))]
        scenarios.append(
            _build_scenario(f"syn-{config.seed}-{k:05d}", template, rng, config)
        )
    return scenarios
