"""Distance-preserving scenario embedding with out-of-sample extension.

A set of landmark scenarios is embedded by classical multidimensional
scaling on their pairwise scenario-distance matrix; the fitted model then
places any new scenario by its distances to the landmarks alone, so the
expensive all-pairs computation happens once. Embedded coordinates are
scaled so the farthest landmark pair sits at exactly 100.
"""
from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .errors import DataError, DimensionError, InputError
from .graph_dtw import (
    CompiledScenario,
    DtwConfig,
    SceneCostConfig,
    compile_scenario,
    compiled_distance,
)
from .scenarios import AtomScenario

MODEL_VERSION = "v1"
DEFAULT_DIM = 64
DEFAULT_LANDMARK_COUNT = 512


@dataclass
class EmbeddingModel:
    """Fitted landmark embedding.

    landmark_vectors are already in the normalized (0-100) space; eigvecs
    and eigvals are the raw spectral data needed to place new points, and
    mean_sq_row holds the squared-distance row means used for centering.
    """

    dim: int
    landmarks: list[str]
    landmark_vectors: np.ndarray  # (L, dim), scaled
    mean_sq_row: np.ndarray  # (L,)
    scale: float
    eigvals: np.ndarray = field(repr=False, default=None)  # (dim,)
    eigvecs: np.ndarray = field(repr=False, default=None)  # (L, dim)

    def __post_init__(self):
        L = len(self.landmarks)
        if self.dim > L - 1:
            raise InputError(f"dim {self.dim} needs at least {self.dim + 1} landmarks")
        if self.scale <= 0:
            raise InputError("scale must be positive")
        if not np.all(np.isfinite(self.landmark_vectors)):
            raise InputError("landmark vectors must be finite")


@dataclass
class EmbeddingVector:
    values: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 1 or not np.all(np.isfinite(self.values)):
            raise InputError("embedding must be a finite 1-d vector")


def _validate_distance_matrix(D: np.ndarray) -> np.ndarray:
    D = np.asarray(D, dtype=np.float64)
    if D.ndim != 2 or D.shape[0] != D.shape[1]:
        raise InputError(f"distance matrix must be square, got {D.shape}")
    if not np.allclose(D, D.T, atol=1e-8):
        raise InputError("distance matrix must be symmetric")
    if np.abs(np.diag(D)).max() > 1e-9:
        raise InputError("distance matrix must have a zero diagonal")
    return D


def fit(
    distances: np.ndarray,
    dim: int = DEFAULT_DIM,
    landmark_ids: Optional[Sequence[str]] = None,
) -> EmbeddingModel:
    """Classical MDS on a landmark distance matrix.

    Double-centers the squared distances, eigendecomposes, and keeps the
    top-dim positive eigenpairs; coordinates are eigenvectors scaled by
    sqrt(eigenvalue). Raises a dimension error naming the usable rank when
    the matrix cannot support `dim` positive directions.
    """
    D = _validate_distance_matrix(distances)
    L = D.shape[0]
    if dim < 1:
        raise InputError("dim must be >= 1")
    if L < dim + 1:
        raise InputError(f"need at least dim+1={dim + 1} landmarks, got {L}")
    if landmark_ids is None:
        landmark_ids = [str(i) for i in range(L)]
    elif len(landmark_ids) != L:
        raise InputError("landmark_ids length must match matrix size")

    D2 = D * D
    row_means = D2.mean(axis=1)
    grand = D2.mean()
    B = -0.5 * (D2 - row_means[:, None] - row_means[None, :] + grand)
    eigvals, eigvecs = np.linalg.eigh(B)
    order = np.argsort(eigvals)[::-1]
    eigvals = eigvals[order]
    eigvecs = eigvecs[:, order]

    tol = L * np.finfo(np.float64).eps * max(abs(eigvals[0]), 1.0)
    usable_rank = int(np.sum(eigvals > tol))
    if usable_rank < dim:
        raise DimensionError(
            f"distance matrix supports only {usable_rank} positive directions, "
            f"requested dim={dim}",
            usable_rank=usable_rank,
        )

    top_vals = eigvals[:dim]
    top_vecs = eigvecs[:, :dim]
    coords = top_vecs * np.sqrt(top_vals)[None, :]

    # Normalize so the farthest landmark pair lands at exactly 100.
    diffs = coords[:, None, :] - coords[None, :, :]
    max_dist = float(np.sqrt((diffs**2).sum(axis=2)).max())
    if max_dist <= 0:
        raise InputError("all landmarks coincide; cannot set a 0-100 scale")
    scale = 100.0 / max_dist

    return EmbeddingModel(
        dim=dim,
        landmarks=list(landmark_ids),
        landmark_vectors=coords * scale,
        mean_sq_row=row_means,
        scale=scale,
        eigvals=top_vals,
        eigvecs=top_vecs,
    )


def select_landmarks(D: np.ndarray, count: int, seed: int = 0) -> np.ndarray:
    """Pick `count` well-spread row indices by farthest-point traversal.

    The first landmark is drawn from the seed; each next one maximizes its
    distance to the already-chosen set, which keeps the extremes of the
    corpus represented.
    """
    D = np.asarray(D)
    n = D.shape[0]
    if count >= n:
        return np.arange(n)
    rng = np.random.default_rng(seed)
    chosen = np.empty(count, dtype=np.int64)
    chosen[0] = int(rng.integers(n))
    closest = D[chosen[0]].copy()
    for k in range(1, count):
        chosen[k] = int(np.argmax(closest))
        np.minimum(closest, D[chosen[k]], out=closest)
    return np.sort(chosen)


def embed_distances(delta: np.ndarray, model: EmbeddingModel) -> EmbeddingVector:
    """Place a point given its raw distances to every landmark.

    Out-of-sample extension of the fitted MDS: center the squared distances
    against the stored row means and project through the eigenpairs. On a
    landmark's own distance column this reproduces its stored vector.
    """
    delta = np.asarray(delta, dtype=np.float64)
    if delta.shape != (len(model.landmarks),):
        raise InputError(
            f"need {len(model.landmarks)} landmark distances, got {delta.shape}"
        )
    b = -0.5 * (delta**2 - model.mean_sq_row)
    raw = (model.eigvecs.T @ b) / np.sqrt(model.eigvals)
    return EmbeddingVector(raw * model.scale)


def embed(
    scenario: AtomScenario,
    model: EmbeddingModel,
    distance_fn: Callable[[AtomScenario, str], float],
) -> EmbeddingVector:
    """Embed one scenario from its distances to the model's landmarks."""
    delta = np.empty(len(model.landmarks))
    for i, lid in enumerate(model.landmarks):
        try:
            delta[i] = distance_fn(scenario, lid)
        except Exception as exc:
            raise DataError(
                f"distance to landmark {lid!r} failed for scenario "
                f"{scenario.scenario_id!r}: {exc}"
            ) from exc
    return embed_distances(delta, model)


def embed_batch(
    scenarios: Sequence[AtomScenario],
    model: EmbeddingModel,
    distance_fn: Callable[[AtomScenario, str], float],
    max_workers: Optional[int] = None,
) -> list[EmbeddingVector]:
    """Order-preserving parallel map of embed over scenarios."""
    if not scenarios:
        return []
    workers = max_workers or os.cpu_count() or 1
    if workers <= 1 or len(scenarios) == 1:
        return [embed(s, model, distance_fn) for s in scenarios]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(lambda s: embed(s, model, distance_fn), scenarios))


class LandmarkDistanceFn:
    """Callable (scenario, landmark_id) -> raw scenario distance.

    Landmark scenarios are compiled once up front; the query scenario's
    compilation is memoized so embedding against L landmarks flattens it a
    single time.
    """

    def __init__(
        self,
        landmark_scenarios: Sequence[AtomScenario],
        scfg: Optional[SceneCostConfig] = None,
        dcfg: Optional[DtwConfig] = None,
    ):
        self.scfg = scfg or SceneCostConfig()
        self.dcfg = dcfg or DtwConfig()
        self._landmarks: dict[str, CompiledScenario] = {
            s.scenario_id: compile_scenario(s) for s in landmark_scenarios
        }
        self._last: Optional[tuple[int, CompiledScenario]] = None

    def __call__(self, scenario: AtomScenario, landmark_id: str) -> float:
        if landmark_id not in self._landmarks:
            raise InputError(f"unknown landmark {landmark_id!r}")
        key = id(scenario)
        if self._last is None or self._last[0] != key:
            self._last = (key, compile_scenario(scenario))
        return compiled_distance(
            self._last[1], self._landmarks[landmark_id], self.scfg, self.dcfg
        )


def save_model(model: EmbeddingModel, path: str) -> None:
    np.savez(
        path if path.endswith(".npz") else path + ".npz",
        version=MODEL_VERSION,
        dim=model.dim,
        scale=model.scale,
        landmarks=np.array(model.landmarks, dtype=object),
        landmark_vectors=model.landmark_vectors,
        mean_sq_row=model.mean_sq_row,
        eigvals=model.eigvals,
        eigvecs=model.eigvecs,
    )


def model_path(path: str) -> str:
    return path if path.endswith(".npz") else path + ".npz"


def load_model(path: str) -> EmbeddingModel:
    with np.load(model_path(path), allow_pickle=True) as data:
        version = str(data["version"])
        if version != MODEL_VERSION:
            raise DataError(f"unsupported embedding model version {version!r}")
        return EmbeddingModel(
            dim=int(data["dim"]),
            landmarks=[str(x) for x in data["landmarks"]],
            landmark_vectors=np.asarray(data["landmark_vectors"], dtype=np.float64),
            mean_sq_row=np.asarray(data["mean_sq_row"], dtype=np.float64),
            scale=float(data["scale"]),
            eigvals=np.asarray(data["eigvals"], dtype=np.float64),
            eigvecs=np.asarray(data["eigvecs"], dtype=np.float64),
        )
