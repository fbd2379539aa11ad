"""Retrieval-augmented planning pipeline.

From the current scenario, candidate future scenarios are built with
quintic-polynomial ego trajectories over several horizons (neighbors
extrapolated at constant velocity), embedded, and searched against the
per-interaction-type index; the retrieved scenarios are reorganized into a
reference-case list, assembled into a sectioned prompt, and handed to a
pluggable language-model client whose response is parsed into waypoints
and scored by average displacement error.
"""
from __future__ import annotations

import json
import math
import os
import re
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .embedding import EmbeddingModel, LandmarkDistanceFn, embed_batch
from .errors import (
    ConfigError,
    DataError,
    InputError,
    LlmParseError,
    LlmTransportError,
    RoutingError,
)
from .index import expand, search
from .reorg import RagSelection, reorganize
from .scenarios import (
    DIRECTIONAL_RELATIONS,
    VEHICLE,
    AtomScenario,
    NodeState,
    SceneGraph,
    ScenarioStore,
    derive_relations,
    wrap_angle,
)
from .synthetic import LANE_WIDTH

MANEUVERS = ("lane_keep", "lane_left", "lane_right", "decelerate")
_HEADING_SPEED_GATE = 0.3

DEFAULT_INSTRUCTIONS = (
    "You are the motion planner of an autonomous vehicle. Read the scenario "
    "description, reason through the questions, and use the reference cases "
    "as precedents for how similar situations were handled."
)
DEFAULT_COT_QUESTIONS = (
    "Which reference case most resembles the current scene, and why?",
    "Which surrounding vehicles constrain the ego's next maneuver?",
    "Is the intended maneuver safe with respect to each nearby vehicle?",
    "Which candidate trajectory best balances progress and safety?",
)


# ---------------------------------------------------------------------------
# quintic trajectories


@dataclass(frozen=True)
class QuinticCoeffs:
    """Degree-5 polynomial per axis; row k of coeffs is axis k's a0..a5."""

    coeffs: np.ndarray
    horizon: float

    def __post_init__(self):
        c = np.asarray(self.coeffs, dtype=np.float64)
        if c.ndim != 2 or c.shape[1] != 6:
            raise InputError("coeffs must be (axes, 6)")
        if not np.all(np.isfinite(c)):
            raise InputError("coefficients must be finite")
        if self.horizon <= 0:
            raise InputError("horizon must be positive")
        object.__setattr__(self, "coeffs", c)

    def _eval(self, t, order: int) -> np.ndarray:
        c = np.polynomial.polynomial.polyder(self.coeffs.T, m=order, axis=0)
        out = np.polynomial.polynomial.polyval(t, c, tensor=True)
        return np.moveaxis(out, 0, -1)  # (..., axes)

    def position(self, t) -> np.ndarray:
        return self._eval(t, 0)

    def velocity(self, t) -> np.ndarray:
        return self._eval(t, 1)

    def acceleration(self, t) -> np.ndarray:
        return self._eval(t, 2)


def quintic(start, end, horizon: float) -> QuinticCoeffs:
    """Solve the degree-5 boundary-value problem per axis.

    ``start`` and ``end`` are (axes, 3) arrays of position, velocity, and
    acceleration; the unique quintic matching all six conditions per axis
    comes from the closed-form lower half plus a 3x3 solve for a3..a5.
    """
    start = np.atleast_2d(np.asarray(start, dtype=np.float64))
    end = np.atleast_2d(np.asarray(end, dtype=np.float64))
    if start.shape != end.shape or start.shape[1] != 3:
        raise InputError("start and end must both be (axes, 3) states")
    if not (np.all(np.isfinite(start)) and np.all(np.isfinite(end))):
        raise InputError("boundary states must be finite")
    if horizon <= 0:
        raise InputError("horizon must be positive")
    T = float(horizon)
    A = np.array(
        [
            [T**3, T**4, T**5],
            [3 * T**2, 4 * T**3, 5 * T**4],
            [6 * T, 12 * T**2, 20 * T**3],
        ]
    )
    coeffs = np.empty((start.shape[0], 6))
    for ax in range(start.shape[0]):
        p0, v0, acc0 = start[ax]
        p1, v1, acc1 = end[ax]
        a0, a1, a2 = p0, v0, acc0 / 2.0
        b = np.array(
            [
                p1 - (a0 + a1 * T + a2 * T * T),
                v1 - (a1 + 2 * a2 * T),
                acc1 - 2 * a2,
            ]
        )
        coeffs[ax, :3] = (a0, a1, a2)
        coeffs[ax, 3:] = np.linalg.solve(A, b)
    return QuinticCoeffs(coeffs=coeffs, horizon=T)


# ---------------------------------------------------------------------------
# prompt scenario construction


def default_horizons(n: int) -> list[float]:
    """n horizons spread over 2-4 s (a single candidate plans 3 s ahead)."""
    if n == 1:
        return [3.0]
    return [round(float(h), 1) for h in np.linspace(2.0, 4.0, n)]


def _terminal_state(ego: NodeState, maneuver: str, T: float):
    p0 = np.array(ego.position)
    v0 = np.array(ego.velocity)
    heading = ego.heading
    perp = np.array([-math.sin(heading), math.cos(heading)])
    if maneuver == "lane_keep":
        p1, v1 = p0 + v0 * T, v0
    elif maneuver == "lane_left":
        p1, v1 = p0 + v0 * T + perp * LANE_WIDTH, v0
    elif maneuver == "lane_right":
        p1, v1 = p0 + v0 * T - perp * LANE_WIDTH, v0
    elif maneuver == "decelerate":
        v1 = 0.5 * v0
        p1 = p0 + 0.5 * (v0 + v1) * T
    else:
        raise InputError(f"unknown maneuver {maneuver!r}")
    start = np.column_stack([p0, v0, np.zeros(2)])
    end = np.column_stack([p1, v1, np.zeros(2)])
    return start, end


def make_prompt_scenarios(
    current: AtomScenario,
    n: int,
    horizons: Sequence[float],
    tick: float = 0.1,
    maneuvers: Optional[Sequence[str]] = None,
    relation_radius: Optional[float] = None,
) -> list[AtomScenario]:
    """Build n candidate future scenarios from the current scene.

    The ego follows a quintic to a maneuver-dependent terminal state over
    each horizon; every other vehicle is extrapolated at constant velocity
    from the current last frame, so all candidates share one neighbor
    prediction. Relations are re-derived per frame.
    """
    if n < 1:
        raise InputError("n must be >= 1")
    if len(horizons) != n:
        raise InputError("horizons length must equal n")
    if maneuvers is None:
        maneuvers = [MANEUVERS[j % len(MANEUVERS)] for j in range(n)]
    elif len(maneuvers) != n:
        raise InputError("maneuvers length must equal n")
    last = current.frames[-1]
    ego0 = last.node(current.ego_id)
    neighbors = [v for v in last.vehicles() if v.node_id != current.ego_id]
    road_nodes = last.road_nodes()

    out = []
    for j in range(n):
        T = float(horizons[j])
        if T <= 0:
            raise InputError(f"horizon {j} must be positive")
        start, end = _terminal_state(ego0, maneuvers[j], T)
        coeffs = quintic(start, end, T)
        nticks = max(1, round(T / tick))
        frames = []
        prev_heading = ego0.heading
        for k in range(nticks + 1):
            t = round(k * tick, 6)
            p = coeffs.position(t)
            v = coeffs.velocity(t)
            if math.hypot(v[0], v[1]) > _HEADING_SPEED_GATE:
                prev_heading = wrap_angle(math.atan2(v[1], v[0]))
            nodes = [
                NodeState(
                    current.ego_id,
                    VEHICLE,
                    (float(p[0]), float(p[1])),
                    (float(v[0]), float(v[1])),
                    prev_heading,
                    lane_id=ego0.lane_id,
                )
            ]
            for nb in neighbors:
                nodes.append(
                    NodeState(
                        nb.node_id,
                        VEHICLE,
                        (
                            nb.position[0] + nb.velocity[0] * t,
                            nb.position[1] + nb.velocity[1] * t,
                        ),
                        nb.velocity,
                        nb.heading,
                        lane_id=nb.lane_id,
                    )
                )
            nodes.extend(road_nodes)
            kwargs = {} if relation_radius is None else {"radius": relation_radius}
            frames.append(
                derive_relations(
                    SceneGraph(nodes=nodes, edges=[], timestamp=t),
                    ego_id=current.ego_id,
                    **kwargs,
                )
            )
        endpoint = coeffs.position(T)
        out.append(
            AtomScenario(
                scenario_id=f"{current.scenario_id}-prompt{j}",
                ego_id=current.ego_id,
                interaction_type=current.interaction_type,
                frames=frames,
                goal=(float(endpoint[0]), float(endpoint[1])),
            )
        )
    return out


# ---------------------------------------------------------------------------
# scenario -> text rendering


def render_scenario_text(scenario: AtomScenario, sample_hz: float = 1.0) -> str:
    """Ego-centric description, one line per sampled frame.

    Frames are subsampled to ``sample_hz`` to keep prompts short; each line
    carries the ego state plus its directional relations sorted in a fixed
    order, so equal scenarios render equally and differing ones differ.
    """
    if sample_hz <= 0:
        raise InputError("sample_hz must be positive")
    t0 = scenario.frames[0].timestamp
    rel_times = [f.timestamp - t0 for f in scenario.frames]
    duration = rel_times[-1]
    targets = np.arange(0.0, duration + 1e-9, 1.0 / sample_hz)
    chosen = sorted({int(np.argmin(np.abs(np.array(rel_times) - t))) for t in targets})

    header = (
        f"scenario {scenario.scenario_id} ({scenario.interaction_type}), "
        f"duration {scenario.duration:.1f} s"
    )
    lines = [header]
    if scenario.goal is not None:
        lines.append(f"goal: ({scenario.goal[0]:.2f}, {scenario.goal[1]:.2f})")
    order = {r: i for i, r in enumerate(DIRECTIONAL_RELATIONS)}
    for i in chosen:
        frame = scenario.frames[i]
        ego = frame.node(scenario.ego_id)
        speed = math.hypot(*ego.velocity)
        parts = [
            f"t={rel_times[i]:.1f}s ego at ({ego.position[0]:.2f}, "
            f"{ego.position[1]:.2f}) speed {speed:.2f} m/s"
        ]
        if ego.lane_id is not None:
            parts.append(f"lane {ego.lane_id}")
        rels = sorted(
            (
                (order[e.relation], e.dst, e.relation, e.distance)
                for e in frame.edges
                if e.src == scenario.ego_id and e.relation in order
            ),
        )
        parts.extend(f"{rel} {dst} at {dist:.2f} m" for _, dst, rel, dist in rels)
        lines.append("; ".join(parts))
    return "\n".join(lines)


# ---------------------------------------------------------------------------
# prompt bundle


@dataclass
class PromptBundle:
    """Sectioned prompt: instructions, scene, task, questions, references."""

    instructions: str
    scenario_description: str
    task: str
    cot_questions: list[str]
    reference_cases: list[str]
    max_references: int

    def __post_init__(self):
        if len(self.reference_cases) > self.max_references:
            raise InputError("more reference cases than the configured maximum")

    @property
    def has_references(self) -> bool:
        return bool(self.reference_cases)

    def render(self) -> str:
        sections = [
            "# Instructions\n" + self.instructions,
            "# Scenario\n" + self.scenario_description,
            "# Task\n" + self.task,
            "# Chain of Thought\n"
            + "\n".join(f"{i + 1}. {q}" for i, q in enumerate(self.cot_questions)),
        ]
        if self.reference_cases:
            body = "\n\n".join(
                f"## Case {i + 1}\n{case}"
                for i, case in enumerate(self.reference_cases)
            )
        else:
            body = "No reference cases available."
        sections.append("# Reference Cases\n" + body)
        return "\n\n".join(sections) + "\n"


def _task_text(current: AtomScenario, horizon: float, step: float) -> str:
    ego = current.frames[-1].node(current.ego_id)
    return (
        f"The ego vehicle is at ({ego.position[0]:.3f}, {ego.position[1]:.3f}) m "
        f"with velocity ({ego.velocity[0]:.3f}, {ego.velocity[1]:.3f}) m/s. "
        f"Plan its trajectory for the next {horizon:.1f} s at {step:.1f} s "
        "intervals. Respond with one `t,x,y` line per waypoint inside a "
        "```plan fenced block, and add any warnings as lines starting with "
        "'warning:'."
    )


# ---------------------------------------------------------------------------
# plan responses


@dataclass
class PlanResponse:
    """Parsed planner output: timed waypoints plus free-text warnings."""

    waypoints: list[tuple[float, float, float]]
    warnings: list[str]
    raw: str

    def __post_init__(self):
        times = [w[0] for w in self.waypoints]
        if any(b <= a for a, b in zip(times, times[1:])):
            raise InputError("waypoint times must be strictly increasing")

    def as_array(self) -> np.ndarray:
        return np.asarray(self.waypoints, dtype=np.float64).reshape(-1, 3)


_PLAN_BLOCK_RE = re.compile(r"```plan\s*\n(.*?)```", re.DOTALL)


def parse_plan_response(text: str) -> PlanResponse:
    """Parse the fenced `t,x,y` waypoint grammar out of a model response."""
    m = _PLAN_BLOCK_RE.search(text)
    if not m:
        raise LlmParseError("no ```plan fenced block found", raw_text=text)
    waypoints = []
    for line in m.group(1).splitlines():
        line = line.strip()
        if not line:
            continue
        parts = line.split(",")
        if len(parts) != 3:
            raise LlmParseError(f"bad waypoint line {line!r}", raw_text=text)
        try:
            t, x, y = (float(p) for p in parts)
        except ValueError:
            raise LlmParseError(f"non-numeric waypoint {line!r}", raw_text=text)
        waypoints.append((t, x, y))
    if not waypoints:
        raise LlmParseError("plan block contains no waypoints", raw_text=text)
    times = [w[0] for w in waypoints]
    if any(b <= a for a, b in zip(times, times[1:])):
        raise LlmParseError("waypoint times not strictly increasing", raw_text=text)
    warnings = [
        line.strip()[len("warning:"):].strip()
        for line in text.splitlines()
        if line.strip().lower().startswith("warning:")
    ]
    return PlanResponse(waypoints=waypoints, warnings=warnings, raw=text)


# ---------------------------------------------------------------------------
# llm clients


class MockLLMClient:
    """Offline planner stub: echoes a constant-velocity plan.

    It reads the ego state and the horizon/step out of the task section and
    emits waypoints on that grid, so tests get deterministic, physically
    sensible plans without any network dependency.
    """

    _STATE_RE = re.compile(
        r"at \((-?[\d.]+), (-?[\d.]+)\) m with velocity "
        r"\((-?[\d.]+), (-?[\d.]+)\) m/s"
    )
    _GRID_RE = re.compile(r"next ([\d.]+) s at ([\d.]+) s intervals")

    def complete(self, prompt: str) -> str:
        state = self._STATE_RE.search(prompt)
        grid = self._GRID_RE.search(prompt)
        if not state or not grid:
            raise InputError("mock client requires the standard task format")
        x, y, vx, vy = (float(g) for g in state.groups())
        horizon, step = (float(g) for g in grid.groups())
        lines = []
        t = step
        while t <= horizon + 1e-9:
            lines.append(f"{t:.2f},{x + vx * t:.3f},{y + vy * t:.3f}")
            t += step
        return (
            "Proceeding with a constant-velocity rollout of the current "
            "state.\n"
            "warning: mock plan ignores interactions and road geometry.\n"
            "```plan\n" + "\n".join(lines) + "\n```\n"
        )


class HttpLLMClient:
    """Minimal HTTP client: POST {model, prompt}, expect {"text": ...} back.

    Endpoint, model, and key come from SCENARIO_RAG_LLM_URL / _MODEL /
    _API_KEY; transport problems surface as retriable errors. Tests never
    need this client.
    """

    ENV_URL = "SCENARIO_RAG_LLM_URL"
    ENV_MODEL = "SCENARIO_RAG_LLM_MODEL"
    ENV_KEY = "SCENARIO_RAG_LLM_API_KEY"

    def __init__(self, url: str, model: str = "default", api_key: str = "",
                 timeout_s: float = 30.0):
        self.url = url
        self.model = model
        self.api_key = api_key
        self.timeout_s = timeout_s

    @classmethod
    def from_env(cls) -> "HttpLLMClient":
        url = os.environ.get(cls.ENV_URL)
        if not url:
            raise ConfigError(f"{cls.ENV_URL} is not set")
        return cls(
            url,
            model=os.environ.get(cls.ENV_MODEL, "default"),
            api_key=os.environ.get(cls.ENV_KEY, ""),
        )

    def complete(self, prompt: str) -> str:
        import requests

        headers = {}
        if self.api_key:
            headers["Authorization"] = f"Bearer {self.api_key}"
        try:
            resp = requests.post(
                self.url,
                json={"model": self.model, "prompt": prompt},
                headers=headers,
                timeout=self.timeout_s,
            )
        except requests.RequestException as exc:
            raise LlmTransportError(f"request failed: {exc}") from exc
        if resp.status_code != 200:
            raise LlmTransportError(f"status {resp.status_code}: {resp.text[:200]}")
        try:
            return resp.json()["text"]
        except (ValueError, KeyError) as exc:
            raise LlmTransportError(f"malformed response body: {exc}") from exc


class RecordingLLMClient:
    """Wraps a client and logs every exchange to a JSONL fixture file."""

    def __init__(self, inner, path: str):
        self.inner = inner
        self.path = path

    def complete(self, prompt: str) -> str:
        response = self.inner.complete(prompt)
        with open(self.path, "a", encoding="utf-8") as fh:
            fh.write(json.dumps({"prompt": prompt, "response": response}) + "\n")
        return response


class ReplayLLMClient:
    """Serves responses recorded by RecordingLLMClient, matched by prompt."""

    def __init__(self, path: str):
        self._unused: list[dict] = []
        with open(path, encoding="utf-8") as fh:
            for line in fh:
                if line.strip():
                    self._unused.append(json.loads(line))

    def complete(self, prompt: str) -> str:
        for i, record in enumerate(self._unused):
            if record["prompt"] == prompt:
                return self._unused.pop(i)["response"]
        raise LlmTransportError("no recorded response for this prompt")


def llm_plan(bundle: PromptBundle, client) -> PlanResponse:
    """Send the rendered prompt to the client and parse the reply."""
    return parse_plan_response(client.complete(bundle.render()))


# ---------------------------------------------------------------------------
# displacement error


def ade(
    plan: PlanResponse,
    ground_truth,
    horizon: float = 3.0,
    tick: float = 0.1,
) -> float:
    """Mean Euclidean displacement over [0, horizon] at the given tick.

    Both trajectories are linearly interpolated onto the common tick grid
    (times before the first waypoint clamp to it); each must reach the
    horizon.
    """
    gt = np.asarray(ground_truth, dtype=np.float64).reshape(-1, 3)
    pl = plan.as_array()
    if len(gt) < 1 or len(pl) < 1:
        raise InputError("trajectories must be nonempty")
    if pl[-1, 0] < horizon - 1e-9 or gt[-1, 0] < horizon - 1e-9:
        raise InputError("both trajectories must cover the horizon")
    ticks = np.arange(0.0, horizon + tick / 2, tick)
    px = np.interp(ticks, pl[:, 0], pl[:, 1])
    py = np.interp(ticks, pl[:, 0], pl[:, 2])
    gx = np.interp(ticks, gt[:, 0], gt[:, 1])
    gy = np.interp(ticks, gt[:, 0], gt[:, 2])
    return float(np.mean(np.hypot(px - gx, py - gy)))


# ---------------------------------------------------------------------------
# engine


@dataclass
class RagParams:
    """Pipeline knobs; defaults follow the benchmark configuration."""

    n: int = 5
    K: int = 4
    M: int = 4
    D: float = 10.0
    horizons: Optional[list[float]] = None
    ef_search: Optional[int] = None
    nprobe: Optional[int] = None
    expand_db: bool = True
    signature_frame: int = 0
    plan_horizon: float = 3.0
    plan_step: float = 0.5

    def __post_init__(self):
        if self.n < 1 or self.K < 1 or self.M < 0:
            raise ConfigError("need n >= 1, K >= 1, M >= 0")
        if self.D < 0:
            raise ConfigError("D must be >= 0")
        if self.horizons is not None and len(self.horizons) != self.n:
            raise ConfigError("horizons length must equal n")
        if not (0 < self.plan_step <= self.plan_horizon):
            raise ConfigError("need 0 < plan_step <= plan_horizon")


@dataclass
class RagEngine:
    """Shared handles: scenario store, embedding model, per-type indexes."""

    store: ScenarioStore
    model: EmbeddingModel
    distance_fn: Callable[[AtomScenario, str], float]
    indexes: dict[str, object] = field(default_factory=dict)

    def index_for(self, interaction_type: str):
        if interaction_type not in self.indexes:
            raise RoutingError(
                f"no expert index for interaction type {interaction_type!r}"
            )
        return self.indexes[interaction_type]


def engine_from_artifacts(
    store: ScenarioStore,
    model: EmbeddingModel,
    indexes: dict[str, object],
    scfg=None,
    dcfg=None,
) -> RagEngine:
    """Wire an engine from loaded artifacts.

    The landmark scenarios referenced by the model must all be present in
    the store.
    """
    missing = [lid for lid in model.landmarks if lid not in store]
    if missing:
        raise DataError(f"landmarks missing from store: {missing[:5]}")
    landmarks = [store.get(lid) for lid in model.landmarks]
    return RagEngine(
        store=store,
        model=model,
        distance_fn=LandmarkDistanceFn(landmarks, scfg=scfg, dcfg=dcfg),
        indexes=indexes,
    )


def run_rag(
    current: AtomScenario,
    engine: RagEngine,
    params: Optional[RagParams] = None,
) -> tuple[PromptBundle, RagSelection]:
    """The full per-vehicle request: candidates → retrieve → reorganize → prompt."""
    params = params or RagParams()
    index = engine.index_for(current.interaction_type)
    horizons = params.horizons or default_horizons(params.n)
    prompts = make_prompt_scenarios(current, params.n, horizons)
    vectors = embed_batch(prompts, engine.model, engine.distance_fn)
    V = np.stack([v.values for v in vectors])
    results = search(
        index, V, params.K, ef_search=params.ef_search, nprobe=params.nprobe
    )
    if params.expand_db:
        for scn, vec, res in zip(prompts, V, results):
            expand(index, engine.store, scn, vec, result=res, threshold=params.D)
    selection = reorganize(
        results,
        prompts,
        engine.store,
        params.K,
        params.M,
        signature_frame=params.signature_frame,
    )
    description_parts = [render_scenario_text(current)]
    for j, scn in enumerate(prompts):
        description_parts.append(
            f"candidate {j + 1} ({MANEUVERS[j % len(MANEUVERS)]}, "
            f"{horizons[j]:.1f} s):\n{render_scenario_text(scn)}"
        )
    references = [
        render_scenario_text(engine.store.get(cid)) for cid in selection.chosen_ids
    ]
    bundle = PromptBundle(
        instructions=DEFAULT_INSTRUCTIONS,
        scenario_description="\n\n".join(description_parts),
        task=_task_text(current, params.plan_horizon, params.plan_step),
        cot_questions=list(DEFAULT_COT_QUESTIONS),
        reference_cases=references,
        max_references=params.M,
    )
    return bundle, selection
