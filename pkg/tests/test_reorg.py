"""Retrieval-reorganization tests against walk-order and multiset oracles."""
import math
from collections import Counter

import numpy as np
import pytest

from scenario_rag.errors import DataError, InputError
from scenario_rag.index import SearchResult
from scenario_rag.reorg import (
    QUOTA,
    RELATION_MISMATCH,
    Candidate,
    ChosenEntry,
    DroppedEntry,
    RagSelection,
    RetrievalBundle,
    arrange,
    relation_filter,
    reorganize,
    select,
    signature_matches,
)
from scenario_rag.scenarios import (
    DIRECTIONAL_RELATIONS,
    VEHICLE,
    ROAD_NODE,
    AtomScenario,
    NodeState,
    RelationSignature,
    SceneGraph,
    ScenarioStore,
    derive_relations,
    signature,
)

# Bearing angle (degrees) that lands in the middle of each relation sector.
SECTOR_CENTER = {
    "front": 0.0,
    "front_left": 60.0,
    "rear_left": 120.0,
    "rear": 180.0,
    "rear_right": 240.0,
    "front_right": 300.0,
}


def make_scenario(scenario_id, relations, lane_id=None, goal_lane=None):
    """One-frame scenario whose ego sees the given relation multiset.

    Vehicles are placed at the named sector centers at staggered radii;
    optional ego lane + a road node on `goal_lane` near the goal produce a
    lane connection.
    """
    nodes = [
        NodeState("ego", VEHICLE, (0.0, 0.0), (5.0, 0.0), 0.0, lane_id=lane_id)
    ]
    for j, rel in enumerate(relations):
        theta = math.radians(SECTOR_CENTER[rel])
        r = 8.0 + 3.0 * j
        nodes.append(
            NodeState(
                f"v{j}",
                VEHICLE,
                (r * math.cos(theta), r * math.sin(theta)),
                (5.0, 0.0),
                0.0,
            )
        )
    goal = (40.0, 0.0)
    if goal_lane is not None:
        nodes.append(
            NodeState("r0", ROAD_NODE, (40.0, 0.0), (0.0, 0.0), 0.0, lane_id=goal_lane)
        )
    frame = derive_relations(
        SceneGraph(nodes=nodes, edges=[], timestamp=0.0), ego_id="ego"
    )
    return AtomScenario(
        scenario_id=scenario_id,
        ego_id="ego",
        interaction_type="following",
        frames=[frame],
        goal=goal,
    )


def result_of(ids, dists, truncated=False):
    return SearchResult(list(ids), np.asarray(dists, dtype=np.float64), truncated)


# ---------------------------------------------------------------------------
# arrange


def test_arrange_single_cell():
    bundle = arrange([result_of(["a"], [1.0])], K=1)
    assert bundle.K == 1
    assert bundle.levels[0][0].scenario_id == "a"
    assert bundle.levels[0][0].level == 1


def test_arrange_shape():
    results = [
        result_of(["a", "b", "c"], [1.0, 2.0, 3.0]),
        result_of(["d", "e", "f"], [0.5, 0.6, 0.7]),
    ]
    bundle = arrange(results, K=3)
    assert len(bundle.levels) == 3
    assert all(len(tier) == 2 for tier in bundle.levels)


def test_arrange_transpose_matches_index_arithmetic():
    rng = np.random.default_rng(5)
    results = []
    for i in range(5):
        d = np.sort(rng.uniform(0, 50, size=4))
        results.append(result_of([f"p{i}c{l}" for l in range(4)], d))
    bundle = arrange(results, K=4)
    for l in range(4):
        for i in range(5):
            cand = bundle.levels[l][i]
            assert cand.scenario_id == results[i].neighbor_ids[l]
            assert cand.distance == float(results[i].distances[l])
            assert (cand.prompt_index, cand.level) == (i, l + 1)


def test_arrange_truncated_leaves_gaps():
    results = [
        result_of(["a", "b"], [1.0, 2.0]),
        result_of(["c"], [0.5], truncated=True),
    ]
    bundle = arrange(results, K=2)
    assert bundle.levels[1][0].scenario_id == "b"
    assert bundle.levels[1][1] is None


def test_arrange_validation():
    with pytest.raises(InputError):
        arrange([], K=1)
    with pytest.raises(InputError):
        arrange([result_of(["a"], [1.0])], K=0)
    with pytest.raises(InputError):
        arrange([SearchResult([], np.empty(0), True)], K=1)
    with pytest.raises(InputError):
        arrange([result_of(["a"], [1.0])], K=1, prompt_ids=["x", "y"])


def test_bundle_rejects_decreasing_distances():
    good = Candidate("a", 5.0, 0, 1)
    bad = Candidate("b", 1.0, 0, 2)
    with pytest.raises(InputError):
        RetrievalBundle(prompt_ids=["p"], levels=[[good], [bad]], K=2)


# ---------------------------------------------------------------------------
# signature matching


def test_identity_signature_matches():
    sig = RelationSignature(Counter({"front": 2, "rear": 1}), ("L1", "L2"))
    assert signature_matches(sig, sig)


def test_disjoint_relations_mismatch():
    prompt = RelationSignature(Counter({"front": 1}))
    cand = RelationSignature(Counter({"rear": 1}))
    assert not signature_matches(cand, prompt)


def test_containment_direction():
    prompt = RelationSignature(Counter({"front": 1}))
    cand = RelationSignature(Counter({"front": 2, "rear": 1}))
    assert signature_matches(cand, prompt)
    assert not signature_matches(prompt, RelationSignature(Counter({"front": 2})))


def test_lane_connection_rules():
    rel = Counter({"front": 1})
    both_equal = signature_matches(
        RelationSignature(rel, ("L1", "L2")), RelationSignature(rel, ("L1", "L2"))
    )
    both_differ = signature_matches(
        RelationSignature(rel, ("L1", "L3")), RelationSignature(rel, ("L1", "L2"))
    )
    one_missing = signature_matches(
        RelationSignature(rel, None), RelationSignature(rel, ("L1", "L2"))
    )
    assert both_equal and one_missing and not both_differ


def test_signature_matches_random_multiset_oracle():
    # Counter subtraction is the independent sub-multiset formulation:
    # prompt - candidate leaves nothing iff candidate covers prompt.
    rng = np.random.default_rng(11)
    for _ in range(20):
        prompt = Counter(
            {r: int(rng.integers(0, 3)) for r in DIRECTIONAL_RELATIONS}
        )
        cand = Counter({r: int(rng.integers(0, 3)) for r in DIRECTIONAL_RELATIONS})
        prompt = Counter({r: c for r, c in prompt.items() if c})
        cand = Counter({r: c for r, c in cand.items() if c})
        want = not (prompt - cand)
        got = signature_matches(
            RelationSignature(cand), RelationSignature(prompt)
        )
        assert got == want


# ---------------------------------------------------------------------------
# relation_filter


@pytest.fixture()
def store(tmp_path):
    return ScenarioStore(str(tmp_path / "scenarios.jsonl"))


def test_filter_keeps_prompt_itself(store):
    scn = make_scenario("self", ["front", "rear"], lane_id="L1", goal_lane="L1")
    store.append(scn)
    bundle = arrange([result_of(["self"], [0.0])], K=1, prompt_ids=["self"])
    filtered = relation_filter(bundle, [signature(scn, 0)], store)
    assert filtered.levels[0][0].scenario_id == "self"
    assert filtered.removed == []


def test_filter_removes_and_records(store):
    store.append(make_scenario("front-only", ["front"]))
    store.append(make_scenario("rear-only", ["rear"]))
    prompt = make_scenario("prompt", ["front"])
    bundle = arrange(
        [result_of(["front-only", "rear-only"], [1.0, 2.0])], K=2,
        prompt_ids=["prompt"],
    )
    filtered = relation_filter(bundle, [signature(prompt, 0)], store)
    assert filtered.levels[0][0].scenario_id == "front-only"
    assert filtered.levels[1][0] is None
    assert len(filtered.removed) == 1
    drop = filtered.removed[0]
    assert drop.scenario_id == "rear-only"
    assert drop.reason == RELATION_MISMATCH
    assert drop.level == 2


def test_filter_missing_candidate_is_data_error(store):
    bundle = arrange([result_of(["ghost"], [1.0])], K=1)
    with pytest.raises(DataError):
        relation_filter(
            bundle, [RelationSignature(Counter({"front": 1}))], store
        )


def test_filter_lane_mismatch_drops(store):
    store.append(
        make_scenario("other-lane", ["front"], lane_id="L9", goal_lane="L9")
    )
    prompt = make_scenario("prompt", ["front"], lane_id="L1", goal_lane="L2")
    bundle = arrange([result_of(["other-lane"], [3.0])], K=1)
    filtered = relation_filter(bundle, [signature(prompt, 0)], store)
    assert filtered.levels[0][0] is None
    assert filtered.removed[0].reason == RELATION_MISMATCH


# ---------------------------------------------------------------------------
# select


def random_bundle(rng, n=5, K=4, pool=12, p_gap=0.2):
    """A structurally valid bundle with id collisions across prompts."""
    ids = [f"c{j:02d}" for j in range(pool)]
    levels = [[None] * n for _ in range(K)]
    for i in range(n):
        depth = K if rng.random() > p_gap else int(rng.integers(1, K + 1))
        picks = rng.choice(pool, size=depth, replace=False)
        dists = np.sort(rng.uniform(0, 50, size=depth))
        for l in range(depth):
            levels[l][i] = Candidate(ids[picks[l]], float(dists[l]), i, l + 1)
    return RetrievalBundle(
        prompt_ids=[f"p{i}" for i in range(n)], levels=levels, K=K
    )


def oracle_chosen_ids(bundle, M):
    """Independent formulation: flatten the walk, dedup globally, truncate."""
    walk = [c.scenario_id for tier in bundle.levels for c in tier if c is not None]
    return list(dict.fromkeys(walk))[:M]


def test_select_exhaustion_empty():
    bundle = RetrievalBundle(prompt_ids=["p"], levels=[[None]], K=1)
    sel = select(bundle, 4)
    assert sel.chosen == []


def test_select_all_survivors_when_m_large():
    rng = np.random.default_rng(3)
    bundle = random_bundle(rng)
    sel = select(bundle, M=100)
    assert sel.chosen_ids == oracle_chosen_ids(bundle, 100)


def test_select_dedups_across_prompts():
    shared = [
        Candidate("same", 1.0, 0, 1),
        Candidate("same", 1.5, 1, 1),
    ]
    bundle = RetrievalBundle(prompt_ids=["a", "b"], levels=[shared], K=1)
    sel = select(bundle, 4)
    assert sel.chosen_ids == ["same"]
    assert [d.reason for d in sel.dropped] == [QUOTA]


def test_select_quota_and_level_priority():
    rng = np.random.default_rng(9)
    for _ in range(30):
        bundle = random_bundle(rng)
        sel = select(bundle, M=4)
        assert sel.chosen_ids == oracle_chosen_ids(bundle, 4)
        assert len(sel.chosen) <= 4
        # Level priority: any unchosen survivor must sit at a level >= the
        # last chosen one's, unless its id was already taken earlier.
        if sel.chosen:
            last_level = sel.chosen[-1].level
            chosen_set = set(sel.chosen_ids)
            if len(sel.chosen) == 4:
                for cand in bundle.candidates():
                    if cand.scenario_id not in chosen_set:
                        assert cand.level >= last_level
        levels = [c.level for c in sel.chosen]
        assert levels == sorted(levels)


def test_select_oracle_on_200_bundles():
    rng = np.random.default_rng(42)
    for _ in range(200):
        bundle = random_bundle(rng)
        assert select(bundle, 4).chosen_ids == oracle_chosen_ids(bundle, 4)


def test_selection_validation():
    with pytest.raises(InputError):
        RagSelection(
            chosen=[ChosenEntry("a", 0, 1, 1.0), ChosenEntry("b", 0, 1, 1.0)],
            dropped=[],
            M=1,
        )
    with pytest.raises(InputError):
        RagSelection(
            chosen=[ChosenEntry("a", 0, 2, 1.0), ChosenEntry("b", 0, 1, 1.0)],
            dropped=[],
            M=4,
        )


def test_selection_json_round_trip():
    import json

    sel = RagSelection(
        chosen=[ChosenEntry("a", 0, 1, 2.5)],
        dropped=[DroppedEntry("b", QUOTA, 1, 2)],
        M=4,
    )
    data = json.loads(sel.to_json())
    assert data["chosen"][0]["scenario_id"] == "a"
    assert data["dropped"][0]["reason"] == QUOTA
    assert data["M"] == 4


# ---------------------------------------------------------------------------
# end to end


def test_reorganize_pipeline(store):
    catalog = {
        "s-front": ["front"],
        "s-front2": ["front", "front"],
        "s-mixed": ["front", "rear"],
        "s-rear": ["rear"],
    }
    for sid, rels in catalog.items():
        store.append(make_scenario(sid, rels))
    prompts = [make_scenario("q0", ["front"]), make_scenario("q1", ["front"])]
    results = [
        result_of(["s-front", "s-rear"], [1.0, 4.0]),
        result_of(["s-front", "s-front2"], [1.5, 2.0]),
    ]
    sel = reorganize(results, prompts, store, K=2, M=4)
    # s-rear fails the relation filter; s-front dedups across prompts.
    assert sel.chosen_ids == ["s-front", "s-front2"]
    reasons = Counter(d.reason for d in sel.dropped)
    assert reasons[RELATION_MISMATCH] == 1
    assert reasons[QUOTA] == 1
