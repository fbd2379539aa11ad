"""Scene-graph scenario types, relation derivation, and JSONL persistence.

A scenario is an ordered sequence of per-frame scene graphs: typed nodes
(vehicles and road nodes) joined by directional relation edges. Relations
between vehicles are assigned geometrically by the bearing of the target
vehicle in the source vehicle's heading frame, using six 60-degree sectors.
"""
from __future__ import annotations

import json
import math
import os
from collections import Counter
from dataclasses import dataclass, field, replace
from typing import Iterable, Iterator, Optional

from .errors import DataError, InvalidScenarioError

VEHICLE = "vehicle"
ROAD_NODE = "road_node"

FRONT = "front"
FRONT_LEFT = "front_left"
FRONT_RIGHT = "front_right"
REAR = "rear"
REAR_LEFT = "rear_left"
REAR_RIGHT = "rear_right"
VEHICLE_TO_ROADNODE = "vehicle_to_roadnode"

#: The six directional vehicle-to-vehicle relations, in sector order
#: starting at "front" and sweeping counter-clockwise (left first).
DIRECTIONAL_RELATIONS = (
    FRONT,
    FRONT_LEFT,
    REAR_LEFT,
    REAR,
    REAR_RIGHT,
    FRONT_RIGHT,
)

RELATIONS = DIRECTIONAL_RELATIONS + (VEHICLE_TO_ROADNODE,)

#: Default neighbourhood radius (metres) for vehicle-vehicle edges.
DEFAULT_RELATION_RADIUS = 50.0

STORE_VERSION = "v1"


def wrap_angle(theta: float) -> float:
    """Normalize an angle in radians into (-pi, pi]."""
    wrapped = math.fmod(theta + math.pi, 2.0 * math.pi)
    if wrapped <= 0.0:
        wrapped += 2.0 * math.pi
    return wrapped - math.pi


@dataclass
class NodeState:
    node_id: str
    kind: str
    position: tuple[float, float]
    velocity: tuple[float, float]
    heading: float
    lane_id: Optional[str] = None

    def __post_init__(self):
        if self.kind not in (VEHICLE, ROAD_NODE):
            raise InvalidScenarioError(f"unknown node kind {self.kind!r}")
        if self.kind == ROAD_NODE and any(v != 0.0 for v in self.velocity):
            raise InvalidScenarioError(
                f"road node {self.node_id!r} must have zero velocity"
            )
        self.position = (float(self.position[0]), float(self.position[1]))
        self.velocity = (float(self.velocity[0]), float(self.velocity[1]))
        self.heading = wrap_angle(float(self.heading))


@dataclass
class RelationEdge:
    src: str
    dst: str
    relation: str
    distance: float

    def __post_init__(self):
        if self.relation not in RELATIONS:
            raise InvalidScenarioError(f"unknown relation {self.relation!r}")
        if self.distance <= 0.0:
            raise InvalidScenarioError(
                f"edge {self.src!r}->{self.dst!r} has non-positive distance"
            )


@dataclass
class SceneGraph:
    nodes: list[NodeState]
    edges: list[RelationEdge]
    timestamp: float

    def __post_init__(self):
        ids = [n.node_id for n in self.nodes]
        if len(set(ids)) != len(ids):
            raise InvalidScenarioError("duplicate node ids in frame")
        known = set(ids)
        seen_pairs = set()
        for e in self.edges:
            if e.src == e.dst:
                raise InvalidScenarioError(f"self-loop on {e.src!r}")
            if e.src not in known or e.dst not in known:
                raise InvalidScenarioError(
                    f"edge {e.src!r}->{e.dst!r} references missing node"
                )
            if (e.src, e.dst) in seen_pairs:
                raise InvalidScenarioError(
                    f"duplicate edge {e.src!r}->{e.dst!r}"
                )
            seen_pairs.add((e.src, e.dst))

    def node(self, node_id: str) -> NodeState:
        for n in self.nodes:
            if n.node_id == node_id:
                return n
        raise KeyError(node_id)

    def vehicles(self) -> list[NodeState]:
        return [n for n in self.nodes if n.kind == VEHICLE]

    def road_nodes(self) -> list[NodeState]:
        return [n for n in self.nodes if n.kind == ROAD_NODE]


@dataclass
class AtomScenario:
    scenario_id: str
    ego_id: str
    interaction_type: str
    frames: list[SceneGraph]
    goal: Optional[tuple[float, float]] = None

    def __post_init__(self):
        if not self.frames:
            raise InvalidScenarioError(f"scenario {self.scenario_id!r} has no frames")
        prev = None
        for f in self.frames:
            if prev is not None and f.timestamp <= prev:
                raise InvalidScenarioError(
                    f"scenario {self.scenario_id!r} timestamps not strictly increasing"
                )
            prev = f.timestamp
            if all(n.node_id != self.ego_id for n in f.nodes):
                raise InvalidScenarioError(
                    f"ego {self.ego_id!r} missing from frame at t={f.timestamp}"
                )
        if self.goal is not None:
            self.goal = (float(self.goal[0]), float(self.goal[1]))

    @property
    def duration(self) -> float:
        return self.frames[-1].timestamp - self.frames[0].timestamp

    def ego_state(self, frame_index: int) -> NodeState:
        return self.frames[frame_index].node(self.ego_id)


@dataclass
class RelationSignature:
    """Ego-centric relation summary of one frame, used for retrieval filtering."""

    ego_relations: Counter
    lane_connection: Optional[tuple[str, str]] = None

    def contains(self, other: "RelationSignature") -> bool:
        """True if `other`'s relation multiset is a sub-multiset of this one."""
        return all(self.ego_relations[r] >= c for r, c in other.ego_relations.items())


def bearing_sector(bearing: float) -> str:
    """Map a bearing (radians, in the observer's heading frame) to a relation.

    Sectors are 60 degrees wide with "front" centred on the heading axis:
    front [-30, 30), front_left [30, 90), rear_left [90, 150),
    rear [150, 210), rear_right [210, 270), front_right [270, 330).
    """
    deg = math.degrees(bearing) % 360.0
    if deg >= 330.0:
        deg -= 360.0
    sector = int(math.floor((deg + 30.0) / 60.0))
    return DIRECTIONAL_RELATIONS[sector]


def derive_relations(
    frame: SceneGraph,
    ego_heading_frame: bool = False,
    ego_id: Optional[str] = None,
    radius: float = DEFAULT_RELATION_RADIUS,
) -> SceneGraph:
    """Return a copy of `frame` with relation edges rebuilt from geometry.

    Every ordered vehicle pair within `radius` metres gets exactly one
    directional edge, classified by the bearing from source to target in the
    source vehicle's heading frame (or the ego's heading frame when
    `ego_heading_frame` is set, in which case `ego_id` must name a node).
    Each vehicle is additionally linked to its nearest road node.
    """
    vehicles = frame.vehicles()
    roads = frame.road_nodes()
    if ego_heading_frame:
        if ego_id is None:
            raise InvalidScenarioError("ego_heading_frame requires ego_id")
        ref_heading = frame.node(ego_id).heading

    edges: list[RelationEdge] = []
    for src in vehicles:
        for dst in vehicles:
            if src.node_id == dst.node_id:
                continue
            dx = dst.position[0] - src.position[0]
            dy = dst.position[1] - src.position[1]
            dist = math.hypot(dx, dy)
            if dist <= 0.0 or dist > radius:
                continue
            heading = ref_heading if ego_heading_frame else src.heading
            bearing = wrap_angle(math.atan2(dy, dx) - heading)
            edges.append(
                RelationEdge(src.node_id, dst.node_id, bearing_sector(bearing), dist)
            )
        if roads:
            nearest = min(
                roads,
                key=lambda r: math.hypot(
                    r.position[0] - src.position[0], r.position[1] - src.position[1]
                ),
            )
            dist = math.hypot(
                nearest.position[0] - src.position[0],
                nearest.position[1] - src.position[1],
            )
            # A vehicle sitting exactly on a road node still gets its edge;
            # clamp keeps the positive-distance invariant.
            edges.append(
                RelationEdge(
                    src.node_id, nearest.node_id, VEHICLE_TO_ROADNODE, max(dist, 1e-9)
                )
            )
    return SceneGraph(nodes=list(frame.nodes), edges=edges, timestamp=frame.timestamp)


def signature(scenario: AtomScenario, frame_index: int) -> RelationSignature:
    """Extract the ego-incident relation multiset of one frame.

    Counts the directional relations of edges with the ego as source. The
    lane connection pairs the ego's lane with the lane of the road node
    nearest the scenario goal; it is omitted when either side is unknown.
    """
    frame = scenario.frames[frame_index]
    ego = frame.node(scenario.ego_id)
    relations = Counter(
        e.relation
        for e in frame.edges
        if e.src == scenario.ego_id and e.relation in DIRECTIONAL_RELATIONS
    )

    lane_connection = None
    if ego.lane_id is not None and scenario.goal is not None:
        goal_lane = _nearest_lane(frame, scenario.goal)
        if goal_lane is not None:
            lane_connection = (ego.lane_id, goal_lane)
    return RelationSignature(ego_relations=relations, lane_connection=lane_connection)


def _nearest_lane(frame: SceneGraph, point: tuple[float, float]) -> Optional[str]:
    best_lane = None
    best_dist = math.inf
    for r in frame.road_nodes():
        if r.lane_id is None:
            continue
        d = math.hypot(r.position[0] - point[0], r.position[1] - point[1])
        if d < best_dist:
            best_dist = d
            best_lane = r.lane_id
    return best_lane


# --- JSONL persistence -------------------------------------------------------


def scenario_to_dict(scenario: AtomScenario) -> dict:
    return {
        "version": STORE_VERSION,
        "scenario_id": scenario.scenario_id,
        "ego_id": scenario.ego_id,
        "interaction_type": scenario.interaction_type,
        "goal": list(scenario.goal) if scenario.goal is not None else None,
        "frames": [
            {
                "timestamp": f.timestamp,
                "nodes": [
                    {
                        "id": n.node_id,
                        "kind": n.kind,
                        "x": n.position[0],
                        "y": n.position[1],
                        "vx": n.velocity[0],
                        "vy": n.velocity[1],
                        "heading": n.heading,
                        "lane_id": n.lane_id,
                    }
                    for n in f.nodes
                ],
                "edges": [
                    {
                        "src": e.src,
                        "dst": e.dst,
                        "relation": e.relation,
                        "distance": e.distance,
                    }
                    for e in f.edges
                ],
            }
            for f in scenario.frames
        ],
    }


def scenario_from_dict(record: dict) -> AtomScenario:
    version = record.get("version")
    if version != STORE_VERSION:
        raise DataError(f"unsupported scenario record version {version!r}")
    frames = [
        SceneGraph(
            nodes=[
                NodeState(
                    node_id=n["id"],
                    kind=n["kind"],
                    position=(n["x"], n["y"]),
                    velocity=(n["vx"], n["vy"]),
                    heading=n["heading"],
                    lane_id=n.get("lane_id"),
                )
                for n in f["nodes"]
            ],
            edges=[
                RelationEdge(e["src"], e["dst"], e["relation"], e["distance"])
                for e in f["edges"]
            ],
            timestamp=f["timestamp"],
        )
        for f in record["frames"]
    ]
    goal = record.get("goal")
    return AtomScenario(
        scenario_id=record["scenario_id"],
        ego_id=record["ego_id"],
        interaction_type=record["interaction_type"],
        frames=frames,
        goal=tuple(goal) if goal is not None else None,
    )


def save_scenarios(scenarios: Iterable[AtomScenario], path: str) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for s in scenarios:
            fh.write(json.dumps(scenario_to_dict(s)) + "\n")


def load_scenarios(path: str) -> list[AtomScenario]:
    with open(path, "r", encoding="utf-8") as fh:
        return [scenario_from_dict(json.loads(line)) for line in fh if line.strip()]


class ScenarioStore:
    """Append-only JSONL scenario store with an in-memory id index.

    Appends are flushed and fsynced before returning so that a crash cannot
    leave a search-index entry pointing at a scenario that was never written.
    """

    def __init__(self, path: str):
        self.path = path
        self._by_id: dict[str, AtomScenario] = {}
        if os.path.exists(path):
            for s in load_scenarios(path):
                self._by_id[s.scenario_id] = s

    def __len__(self) -> int:
        return len(self._by_id)

    def __contains__(self, scenario_id: str) -> bool:
        return scenario_id in self._by_id

    def __iter__(self) -> Iterator[AtomScenario]:
        return iter(self._by_id.values())

    def ids(self) -> list[str]:
        return list(self._by_id.keys())

    def get(self, scenario_id: str) -> AtomScenario:
        if scenario_id not in self._by_id:
            raise DataError(f"scenario {scenario_id!r} not in store {self.path}")
        return self._by_id[scenario_id]

    def append(self, scenario: AtomScenario) -> None:
        if scenario.scenario_id in self._by_id:
            raise DataError(f"scenario id {scenario.scenario_id!r} already stored")
        with open(self.path, "a", encoding="utf-8") as fh:
            fh.write(json.dumps(scenario_to_dict(scenario)) + "\n")
            fh.flush()
            os.fsync(fh.fileno())
        self._by_id[scenario.scenario_id] = scenario
