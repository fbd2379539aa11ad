"""Retrieval reorganization: levels, relation filtering, final selection.

The n prompt scenarios each retrieve K neighbors; those n×K candidates are
rearranged into K similarity levels (level l holds every prompt's l-th
nearest hit), candidates whose scene relations cannot cover the prompt's
are filtered out, and the survivors are taken level by level — nearest
tier first — until M scenarios are chosen for the generation context.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Optional

from .errors import DataError, InputError
from .index import SearchResult
from .scenarios import AtomScenario, RelationSignature, ScenarioStore, signature

RELATION_MISMATCH = "relation_mismatch"
QUOTA = "quota"


@dataclass(frozen=True)
class Candidate:
    """One retrieved scenario at a specific (prompt, level) cell."""

    scenario_id: str
    distance: float
    prompt_index: int
    level: int


@dataclass(frozen=True)
class DroppedEntry:
    scenario_id: str
    reason: str
    prompt_index: int
    level: int


@dataclass
class RetrievalBundle:
    """n×K retrieval results arranged by similarity level.

    ``levels[l-1][i]`` is prompt i's l-th nearest candidate, or None when
    that prompt returned fewer than l hits. ``removed`` accumulates the
    candidates eliminated by filtering so the final selection can report
    them.
    """

    prompt_ids: list[str]
    levels: list[list[Optional[Candidate]]]
    K: int
    removed: list[DroppedEntry] = field(default_factory=list)

    def __post_init__(self):
        if len(self.levels) != self.K:
            raise InputError("bundle must have exactly K levels")
        n = len(self.prompt_ids)
        for tier in self.levels:
            if len(tier) != n:
                raise InputError("every level must have one cell per prompt")
        for i in range(n):
            prev = -float("inf")
            for tier in self.levels:
                cand = tier[i]
                if cand is None:
                    continue
                if cand.distance < prev:
                    raise InputError(
                        f"distances for prompt {i} must be nondecreasing by level"
                    )
                prev = cand.distance

    @property
    def num_prompts(self) -> int:
        return len(self.prompt_ids)

    def candidates(self) -> list[Candidate]:
        """All surviving candidates in (level, prompt) walk order."""
        return [c for tier in self.levels for c in tier if c is not None]


@dataclass(frozen=True)
class ChosenEntry:
    scenario_id: str
    prompt_index: int
    level: int
    distance: float


@dataclass
class RagSelection:
    """Audit record of the final context selection."""

    chosen: list[ChosenEntry]
    dropped: list[DroppedEntry]
    M: int

    def __post_init__(self):
        if len(self.chosen) > self.M:
            raise InputError("chosen may not exceed M")
        ids = [c.scenario_id for c in self.chosen]
        if len(set(ids)) != len(ids):
            raise InputError("chosen ids must be distinct")
        levels = [c.level for c in self.chosen]
        if any(b < a for a, b in zip(levels, levels[1:])):
            raise InputError("chosen levels must be nondecreasing")

    @property
    def chosen_ids(self) -> list[str]:
        return [c.scenario_id for c in self.chosen]

    def to_dict(self) -> dict:
        return {
            "M": self.M,
            "chosen": [
                {
                    "scenario_id": c.scenario_id,
                    "prompt_index": c.prompt_index,
                    "level": c.level,
                    "distance": c.distance,
                }
                for c in self.chosen
            ],
            "dropped": [
                {
                    "scenario_id": d.scenario_id,
                    "reason": d.reason,
                    "prompt_index": d.prompt_index,
                    "level": d.level,
                }
                for d in self.dropped
            ],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)


def arrange(
    results: list[SearchResult],
    K: int,
    prompt_ids: Optional[list[str]] = None,
) -> RetrievalBundle:
    """Transpose per-prompt rankings into K level lists.

    Truncated results (fewer than K hits) leave None gaps at deep levels.
    """
    if K < 1:
        raise InputError("K must be >= 1")
    if not results:
        raise InputError("need at least one search result")
    for i, r in enumerate(results):
        if len(r.neighbor_ids) == 0:
            raise InputError(f"search result {i} is empty")
    if prompt_ids is None:
        prompt_ids = [f"prompt-{i}" for i in range(len(results))]
    if len(prompt_ids) != len(results):
        raise InputError("prompt_ids must align with results")
    levels: list[list[Optional[Candidate]]] = []
    for l in range(1, K + 1):
        tier: list[Optional[Candidate]] = []
        for i, r in enumerate(results):
            if l <= len(r.neighbor_ids):
                tier.append(
                    Candidate(
                        scenario_id=r.neighbor_ids[l - 1],
                        distance=float(r.distances[l - 1]),
                        prompt_index=i,
                        level=l,
                    )
                )
            else:
                tier.append(None)
        levels.append(tier)
    return RetrievalBundle(prompt_ids=prompt_ids, levels=levels, K=K)


def signature_matches(
    candidate_sig: RelationSignature, prompt_sig: RelationSignature
) -> bool:
    """Candidate relations must cover the prompt's; lanes must agree if known.

    Containment rather than equality tolerates extra background vehicles in
    the stored scenario; the lane connection is compared only when both
    sides carry one, preserving goal consistency without punishing unlabeled
    data.
    """
    if not candidate_sig.contains(prompt_sig):
        return False
    if (
        candidate_sig.lane_connection is not None
        and prompt_sig.lane_connection is not None
        and candidate_sig.lane_connection != prompt_sig.lane_connection
    ):
        return False
    return True


def relation_filter(
    bundle: RetrievalBundle,
    prompt_signatures: list[RelationSignature],
    store: ScenarioStore,
    signature_frame: int = 0,
) -> RetrievalBundle:
    """Remove candidates whose relations cannot cover their prompt's.

    Signatures are taken at ``signature_frame`` (the decision point, frame 0
    by default). Removed candidates are recorded on the returned bundle.
    """
    if len(prompt_signatures) != bundle.num_prompts:
        raise InputError("need one prompt signature per prompt")
    sig_cache: dict[str, RelationSignature] = {}

    def candidate_sig(scenario_id: str) -> RelationSignature:
        if scenario_id not in sig_cache:
            scenario = store.get(scenario_id)
            if signature_frame >= len(scenario.frames):
                raise DataError(
                    f"scenario {scenario_id!r} has no frame {signature_frame}"
                )
            sig_cache[scenario_id] = signature(scenario, signature_frame)
        return sig_cache[scenario_id]

    removed = list(bundle.removed)
    new_levels: list[list[Optional[Candidate]]] = []
    for tier in bundle.levels:
        new_tier: list[Optional[Candidate]] = []
        for cand in tier:
            if cand is None:
                new_tier.append(None)
                continue
            if signature_matches(candidate_sig(cand.scenario_id),
                                 prompt_signatures[cand.prompt_index]):
                new_tier.append(cand)
            else:
                new_tier.append(None)
                removed.append(
                    DroppedEntry(
                        scenario_id=cand.scenario_id,
                        reason=RELATION_MISMATCH,
                        prompt_index=cand.prompt_index,
                        level=cand.level,
                    )
                )
        new_levels.append(new_tier)
    return RetrievalBundle(
        prompt_ids=bundle.prompt_ids, levels=new_levels, K=bundle.K, removed=removed
    )


def select(bundle: RetrievalBundle, M: int) -> RagSelection:
    """Choose up to M distinct scenarios, walking levels then prompts in order.

    Survivors that don't make the cut — already chosen under another prompt,
    or arriving after the quota filled — are reported as dropped.
    """
    if M < 0:
        raise InputError("M must be >= 0")
    chosen: list[ChosenEntry] = []
    dropped = list(bundle.removed)
    taken: set[str] = set()
    for tier in bundle.levels:
        for cand in tier:
            if cand is None:
                continue
            if len(chosen) < M and cand.scenario_id not in taken:
                taken.add(cand.scenario_id)
                chosen.append(
                    ChosenEntry(
                        scenario_id=cand.scenario_id,
                        prompt_index=cand.prompt_index,
                        level=cand.level,
                        distance=cand.distance,
                    )
                )
            else:
                dropped.append(
                    DroppedEntry(
                        scenario_id=cand.scenario_id,
                        reason=QUOTA,
                        prompt_index=cand.prompt_index,
                        level=cand.level,
                    )
                )
    return RagSelection(chosen=chosen, dropped=dropped, M=M)


def reorganize(
    results: list[SearchResult],
    prompt_scenarios: list[AtomScenario],
    store: ScenarioStore,
    K: int,
    M: int,
    signature_frame: int = 0,
) -> RagSelection:
    """arrange → relation_filter → select in one call."""
    bundle = arrange(
        results, K, prompt_ids=[s.scenario_id for s in prompt_scenarios]
    )
    sigs = [signature(s, signature_frame) for s in prompt_scenarios]
    filtered = relation_filter(bundle, sigs, store, signature_frame=signature_frame)
    return select(filtered, M)
