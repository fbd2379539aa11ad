import math
import random
from collections import Counter

import pytest

from scenario_rag.errors import DataError, InvalidScenarioError
from scenario_rag.scenarios import (
    DIRECTIONAL_RELATIONS,
    VEHICLE_TO_ROADNODE,
    AtomScenario,
    NodeState,
    RelationEdge,
    SceneGraph,
    ScenarioStore,
    bearing_sector,
    derive_relations,
    load_scenarios,
    save_scenarios,
    scenario_from_dict,
    scenario_to_dict,
    signature,
    wrap_angle,
)


def make_vehicle(node_id, x, y, heading=0.0, vx=0.0, vy=0.0, lane_id=None):
    return NodeState(node_id, "vehicle", (x, y), (vx, vy), heading, lane_id)


def make_road(node_id, x, y, lane_id=None):
    return NodeState(node_id, "road_node", (x, y), (0.0, 0.0), 0.0, lane_id)


class TestWrapAngle:
    def test_identity_inside_range(self):
        assert wrap_angle(0.5) == pytest.approx(0.5)
        assert wrap_angle(-3.0) == pytest.approx(-3.0)

    def test_boundary_pi_maps_to_pi(self):
        assert wrap_angle(math.pi) == pytest.approx(math.pi)
        assert wrap_angle(-math.pi) == pytest.approx(math.pi)

    def test_wraps_multiples(self):
        for theta in [0.3, -2.2, 1.9]:
            for k in (-2, -1, 1, 3):
                assert wrap_angle(theta + 2 * math.pi * k) == pytest.approx(theta)


class TestNodeState:
    def test_road_node_must_be_static(self):
        with pytest.raises(InvalidScenarioError):
            NodeState("r0", "road_node", (0, 0), (1.0, 0.0), 0.0)

    def test_unknown_kind_rejected(self):
        with pytest.raises(InvalidScenarioError):
            NodeState("x", "pedestrian", (0, 0), (0, 0), 0.0)

    def test_heading_normalized(self):
        n = make_vehicle("a", 0, 0, heading=3 * math.pi)
        assert n.heading == pytest.approx(math.pi)


class TestSceneGraphValidation:
    def test_duplicate_node_ids_rejected(self):
        with pytest.raises(InvalidScenarioError):
            SceneGraph(
                nodes=[make_vehicle("a", 0, 0), make_vehicle("a", 1, 1)],
                edges=[],
                timestamp=0.0,
            )

    def test_edge_to_missing_node_rejected(self):
        with pytest.raises(InvalidScenarioError):
            SceneGraph(
                nodes=[make_vehicle("a", 0, 0)],
                edges=[RelationEdge("a", "b", "front", 1.0)],
                timestamp=0.0,
            )

    def test_self_loop_rejected(self):
        with pytest.raises(InvalidScenarioError):
            SceneGraph(
                nodes=[make_vehicle("a", 0, 0)],
                edges=[RelationEdge("a", "a", "front", 1.0)],
                timestamp=0.0,
            )

    def test_duplicate_edge_rejected(self):
        nodes = [make_vehicle("a", 0, 0), make_vehicle("b", 5, 0)]
        with pytest.raises(InvalidScenarioError):
            SceneGraph(
                nodes=nodes,
                edges=[
                    RelationEdge("a", "b", "front", 5.0),
                    RelationEdge("a", "b", "rear", 5.0),
                ],
                timestamp=0.0,
            )


class TestAtomScenarioValidation:
    def test_timestamps_strictly_increasing(self):
        frames = [
            SceneGraph([make_vehicle("ego", 0, 0)], [], timestamp=0.0),
            SceneGraph([make_vehicle("ego", 1, 0)], [], timestamp=0.0),
        ]
        with pytest.raises(InvalidScenarioError):
            AtomScenario("s", "ego", "following", frames)

    def test_ego_present_every_frame(self):
        frames = [
            SceneGraph([make_vehicle("ego", 0, 0)], [], timestamp=0.0),
            SceneGraph([make_vehicle("other", 1, 0)], [], timestamp=0.1),
        ]
        with pytest.raises(InvalidScenarioError):
            AtomScenario("s", "ego", "following", frames)


class TestBearingSector:
    def test_cardinal_examples(self):
        # A target dead ahead is "front"; dead behind is "rear".
        assert bearing_sector(0.0) == "front"
        assert bearing_sector(math.pi) == "rear"
        assert bearing_sector(math.radians(60.0)) == "front_left"
        assert bearing_sector(math.radians(-60.0)) == "front_right"
        assert bearing_sector(math.radians(120.0)) == "rear_left"
        assert bearing_sector(math.radians(-120.0)) == "rear_right"

    def test_sector_boundaries(self):
        # Sectors are half-open: [-30, 30) is front, so exactly +30 deg is
        # front_left and exactly -30 deg is front.
        assert bearing_sector(math.radians(30.0)) == "front_left"
        assert bearing_sector(math.radians(-30.0)) == "front"
        assert bearing_sector(math.radians(29.999)) == "front"
        assert bearing_sector(math.radians(150.0)) == "rear"
        # Negative angles map through the wrapped degree: -150 deg is 210 deg,
        # the lower-inclusive edge of rear_right; -90 deg is 270 deg, the
        # lower-inclusive edge of front_right.
        assert bearing_sector(math.radians(-150.0)) == "rear_right"
        assert bearing_sector(math.radians(-90.0)) == "front_right"

    def test_full_circle_oracle(self):
        # Independent oracle: rotate a unit vector through 0.1-degree steps
        # and classify by explicit interval tests.
        for step in range(0, 3600):
            deg = step / 10.0
            d = deg % 360.0
            if d >= 330.0 or d < 30.0:
                want = "front"
            elif d < 90.0:
                want = "front_left"
            elif d < 150.0:
                want = "rear_left"
            elif d < 210.0:
                want = "rear"
            elif d < 270.0:
                want = "rear_right"
            else:
                want = "front_right"
            assert bearing_sector(math.radians(deg)) == want, deg


class TestDeriveRelations:
    def test_front_and_rear(self):
        frame = SceneGraph(
            nodes=[
                make_vehicle("ego", 0, 0, heading=0.0),
                make_vehicle("lead", 20, 0, heading=0.0),
            ],
            edges=[],
            timestamp=0.0,
        )
        out = derive_relations(frame)
        by_pair = {(e.src, e.dst): e for e in out.edges}
        assert by_pair[("ego", "lead")].relation == "front"
        assert by_pair[("lead", "ego")].relation == "rear"
        assert by_pair[("ego", "lead")].distance == pytest.approx(20.0)

    def test_heading_rotates_sectors(self):
        # Ego faces +y; a car at +x sits exactly on the ego's right, which is
        # the 270-deg lower-inclusive edge of front_right.
        frame = SceneGraph(
            nodes=[
                make_vehicle("ego", 0, 0, heading=math.pi / 2),
                make_vehicle("v", 10, 0, heading=0.0),
            ],
            edges=[],
            timestamp=0.0,
        )
        out = derive_relations(frame)
        rel = {(e.src, e.dst): e.relation for e in out.edges}
        assert rel[("ego", "v")] == "front_right"

    def test_radius_cutoff(self):
        frame = SceneGraph(
            nodes=[
                make_vehicle("ego", 0, 0),
                make_vehicle("near", 49.9, 0),
                make_vehicle("far", 50.1, 0),
            ],
            edges=[],
            timestamp=0.0,
        )
        out = derive_relations(frame)
        pairs = {(e.src, e.dst) for e in out.edges}
        assert ("ego", "near") in pairs
        assert ("ego", "far") not in pairs
        assert ("far", "ego") not in pairs
        # far<->near are 0.2 m apart, still linked to each other.
        assert ("far", "near") in pairs

    def test_nearest_road_node_always_linked(self):
        frame = SceneGraph(
            nodes=[
                make_vehicle("ego", 0, 0),
                make_road("r_near", 60, 0),
                make_road("r_far", 100, 0),
            ],
            edges=[],
            timestamp=0.0,
        )
        out = derive_relations(frame)
        road_edges = [e for e in out.edges if e.relation == VEHICLE_TO_ROADNODE]
        assert len(road_edges) == 1
        assert (road_edges[0].src, road_edges[0].dst) == ("ego", "r_near")
        assert road_edges[0].distance == pytest.approx(60.0)

    def test_ego_heading_frame_uses_ego_heading_for_all(self):
        # With ego_heading_frame, the bearing of b seen from a is measured in
        # the ego's frame, not a's own frame.
        frame = SceneGraph(
            nodes=[
                make_vehicle("ego", 0, 0, heading=math.pi / 2),
                make_vehicle("a", 0, 10, heading=0.0),
                make_vehicle("b", 10, 10, heading=0.0),
            ],
            edges=[],
            timestamp=0.0,
        )
        out = derive_relations(frame, ego_heading_frame=True, ego_id="ego")
        rel = {(e.src, e.dst): e.relation for e in out.edges}
        # b is at +x from a; in ego's +y-facing frame that bearing is -90 deg,
        # the 270-deg edge of front_right.
        assert rel[("a", "b")] == "front_right"
        out_own = derive_relations(frame)
        rel_own = {(e.src, e.dst): e.relation for e in out_own.edges}
        assert rel_own[("a", "b")] == "front"

    def test_ego_heading_frame_requires_ego_id(self):
        frame = SceneGraph([make_vehicle("ego", 0, 0)], [], timestamp=0.0)
        with pytest.raises(InvalidScenarioError):
            derive_relations(frame, ego_heading_frame=True)

    def test_random_frames_match_brute_force_oracle(self):
        rng = random.Random(1234)
        for _ in range(25):
            vehicles = [
                make_vehicle(
                    f"v{i}",
                    rng.uniform(-60, 60),
                    rng.uniform(-60, 60),
                    heading=rng.uniform(-math.pi, math.pi),
                )
                for i in range(6)
            ]
            frame = SceneGraph(vehicles, [], timestamp=0.0)
            out = derive_relations(frame)
            got = {(e.src, e.dst): (e.relation, e.distance) for e in out.edges}

            expected = {}
            for src in vehicles:
                for dst in vehicles:
                    if src.node_id == dst.node_id:
                        continue
                    dx = dst.position[0] - src.position[0]
                    dy = dst.position[1] - src.position[1]
                    dist = math.hypot(dx, dy)
                    if dist > 50.0:
                        continue
                    deg = (math.degrees(math.atan2(dy, dx) - src.heading)) % 360.0
                    if deg >= 330.0 or deg < 30.0:
                        want = "front"
                    elif deg < 90.0:
                        want = "front_left"
                    elif deg < 150.0:
                        want = "rear_left"
                    elif deg < 210.0:
                        want = "rear"
                    elif deg < 270.0:
                        want = "rear_right"
                    else:
                        want = "front_right"
                    expected[(src.node_id, dst.node_id)] = want

            assert set(got) == set(expected)
            for pair, want in expected.items():
                assert got[pair][0] == want, pair

    def test_pairwise_antisymmetry_of_distance(self):
        rng = random.Random(7)
        vehicles = [
            make_vehicle(f"v{i}", rng.uniform(-20, 20), rng.uniform(-20, 20))
            for i in range(5)
        ]
        out = derive_relations(SceneGraph(vehicles, [], timestamp=0.0))
        dist = {(e.src, e.dst): e.distance for e in out.edges}
        for (a, b), d in dist.items():
            assert dist[(b, a)] == pytest.approx(d)


class TestSignature:
    def make_scenario(self):
        frame = SceneGraph(
            nodes=[
                make_vehicle("ego", 0, 0, heading=0.0, lane_id="L1"),
                make_vehicle("v1", 15, 0),
                make_vehicle("v2", 30, 2),
                make_vehicle("v3", -10, 5),
                make_road("r0", 5, 0, lane_id="L1"),
                make_road("r1", 90, 0, lane_id="L2"),
            ],
            edges=[],
            timestamp=0.0,
        )
        frame = derive_relations(frame)
        return AtomScenario("s0", "ego", "following", [frame], goal=(100.0, 0.0))

    def test_counts_ego_outgoing_relations(self):
        sig = signature(self.make_scenario(), 0)
        # v1 and v2 are ahead (front), v3 is behind-left (rear_left at
        # bearing ~153 deg -> rear). Check against hand computation:
        # v3 bearing = atan2(5, -10) = 153.4 deg -> rear.
        assert sig.ego_relations == Counter({"front": 2, "rear": 1})

    def test_lane_connection_to_goal(self):
        sig = signature(self.make_scenario(), 0)
        # Goal (100, 0) is nearest road node r1 with lane L2.
        assert sig.lane_connection == ("L1", "L2")

    def test_lane_connection_absent_without_goal(self):
        s = self.make_scenario()
        s2 = AtomScenario(s.scenario_id, s.ego_id, s.interaction_type, s.frames, goal=None)
        assert signature(s2, 0).lane_connection is None

    def test_containment(self):
        from scenario_rag.scenarios import RelationSignature

        big = RelationSignature(Counter({"front": 2, "rear": 1}))
        small = RelationSignature(Counter({"front": 1}))
        assert big.contains(small)
        assert not small.contains(big)
        assert big.contains(big)


class TestPersistence:
    def make_scenario(self, sid="s0"):
        frames = []
        for k in range(3):
            frame = SceneGraph(
                nodes=[
                    make_vehicle("ego", k * 1.0, 0, heading=0.1, vx=1.0, lane_id="L1"),
                    make_vehicle("v1", 15 + k, 0, vx=0.5),
                    make_road("r0", 20, 0, lane_id="L1"),
                ],
                edges=[],
                timestamp=k * 0.1,
            )
            frames.append(derive_relations(frame))
        return AtomScenario(sid, "ego", "merge", frames, goal=(30.0, 0.0))

    def test_round_trip_dict(self):
        s = self.make_scenario()
        s2 = scenario_from_dict(scenario_to_dict(s))
        assert s2 == s

    def test_round_trip_file(self, tmp_path):
        path = str(tmp_path / "scenarios.jsonl")
        scenarios = [self.make_scenario("a"), self.make_scenario("b")]
        save_scenarios(scenarios, path)
        assert load_scenarios(path) == scenarios

    def test_version_checked(self):
        record = scenario_to_dict(self.make_scenario())
        record["version"] = "v99"
        with pytest.raises(DataError):
            scenario_from_dict(record)

    def test_store_append_and_get(self, tmp_path):
        path = str(tmp_path / "store.jsonl")
        store = ScenarioStore(path)
        s = self.make_scenario("a")
        store.append(s)
        assert len(store) == 1
        assert store.get("a") == s
        # Reopening reads the appended record back.
        store2 = ScenarioStore(path)
        assert store2.get("a") == s

    def test_store_rejects_duplicate_ids(self, tmp_path):
        store = ScenarioStore(str(tmp_path / "store.jsonl"))
        store.append(self.make_scenario("a"))
        with pytest.raises(DataError):
            store.append(self.make_scenario("a"))

    def test_store_get_missing(self, tmp_path):
        store = ScenarioStore(str(tmp_path / "store.jsonl"))
        with pytest.raises(DataError):
            store.get("nope")
