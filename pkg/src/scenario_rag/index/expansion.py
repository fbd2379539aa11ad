"""Database expansion: admit scenarios that sit far from everything known.

A prompt scenario whose nearest retrieved neighbor is farther than the
threshold D is judged novel: it is appended to the scenario store first
(the durable record) and only then inserted into the live index, so a
crash between the two steps can never leave an index entry pointing at a
scenario that was never persisted.
"""
from __future__ import annotations

import math
from typing import Optional

import numpy as np

from ..scenarios import AtomScenario, ScenarioStore
from .base import SearchResult

DEFAULT_EXPANSION_THRESHOLD = 10.0


def expand(
    index,
    store: ScenarioStore,
    scenario: AtomScenario,
    vector: np.ndarray,
    result: Optional[SearchResult] = None,
    threshold: float = DEFAULT_EXPANSION_THRESHOLD,
) -> bool:
    """Append + insert the scenario when its nearest neighbor is > threshold away.

    ``result`` may carry an already-computed search result for this vector;
    otherwise the index is queried for the single nearest neighbor.
    Returns True when the database was expanded.
    """
    if result is None:
        result = index.search_batch(np.asarray(vector, dtype=np.float64), 1)[0]
    nearest = float(result.distances[0]) if len(result.distances) else math.inf
    if nearest <= threshold:
        return False
    store.append(scenario)
    index.insert(vector, scenario.scenario_id)
    return True
