"""Latent-space option discovery.

A trained DVQN agent is rolled out greedily and the latent mean of every visited
state is recorded. The embeddings are clustered with k-means and each cluster
becomes an option: it may start wherever its centroid is the nearest one and it
terminates as soon as another centroid becomes nearest (or the episode ends).
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable, Mapping, Sequence

import numpy as np
import yaml
from pydantic import Field

from agents import DVQNAgent, LoadedCheckpoint, load_checkpoint
from envs import Environment, checkpoint_env, make_env
from errors import ConfigError, DegenerateDataError, NumericalError, StructuralError, UsageError
from nnkit import Rng
from schemas import ConfigModel

logger = logging.getLogger("dvqn")

KMEANS_RESTARTS = 20
KMEANS_MAX_ITER = 300
KMEANS_TOL = 1e-8
DEFAULT_K_RANGE = range(2, 7)
JACOBI_TOL = 1e-12
JACOBI_MAX_SWEEPS = 100
SILHOUETTE_CHUNK = 512
OPTIONS_FORMAT_VERSION = 1
NO_LABEL = -1


@dataclass(frozen=True)
class EmbeddingRecord:
    mu: np.ndarray
    q: np.ndarray
    reward: float
    done: bool
    episode: int
    step: int
    env_label: int | None = None


@dataclass
class LatentDataset:
    records: list[EmbeddingRecord]
    metadata: dict[str, Any] = field(default_factory=dict)

    def __post_init__(self) -> None:
        dims = {len(record.mu) for record in self.records}
        if len(dims) > 1:
            raise StructuralError(f"Embedding records disagree on latent width: {sorted(dims)}.")

    def __len__(self) -> int:
        return len(self.records)

    @property
    def latent_dim(self) -> int:
        if not self.records:
            raise UsageError("Latent dataset is empty.")
        return len(self.records[0].mu)

    def points(self) -> np.ndarray:
        if not self.records:
            raise UsageError("Latent dataset is empty.")
        return np.stack([np.asarray(record.mu, dtype=np.float64) for record in self.records])

    def rewards(self) -> np.ndarray:
        return np.array([record.reward for record in self.records], dtype=np.float64)

    def dones(self) -> np.ndarray:
        return np.array([record.done for record in self.records], dtype=bool)

    def labels(self) -> np.ndarray:
        return np.array(
            [NO_LABEL if record.env_label is None else record.env_label for record in self.records],
            dtype=np.int64,
        )

    def has_labels(self) -> bool:
        return bool(self.records) and all(record.env_label is not None for record in self.records)

    def episodes(self) -> dict[int, list[EmbeddingRecord]]:
        grouped: dict[int, list[EmbeddingRecord]] = {}
        for record in self.records:
            grouped.setdefault(record.episode, []).append(record)
        return {episode: sorted(items, key=lambda r: r.step) for episode, items in grouped.items()}


@dataclass(frozen=True)
class ClusterModel:
    k: int
    centroids: np.ndarray
    assignments: np.ndarray
    inertia: float

    def cluster_sizes(self) -> np.ndarray:
        return np.bincount(self.assignments, minlength=self.k)


@dataclass(frozen=True)
class OptionSpec:
    id: int
    centroid: np.ndarray
    member_count: int
    label_histogram: dict[int, int]
    initiation: str = "nearest-centroid"
    termination: str = "centroid-change"


def _as_points(data: LatentDataset | np.ndarray | Sequence[Sequence[float]]) -> np.ndarray:
    points = data.points() if isinstance(data, LatentDataset) else np.asarray(data, dtype=np.float64)
    if points.ndim != 2 or points.shape[0] == 0:
        raise StructuralError(f"Expected a nonempty (n, d) point array, got shape {points.shape}.")
    if not np.all(np.isfinite(points)):
        raise NumericalError("Latent points contain non-finite values.", node="mu")
    return points


# ===== Collection =====


def collect_embeddings(
    checkpoint: LoadedCheckpoint | DVQNAgent | str | Path,
    env: Environment | str,
    episodes: int,
    rng: Rng,
) -> LatentDataset:
    """Greedy rollouts recording the latent mean of every visited state."""

    digest, layout = "", None
    if isinstance(checkpoint, (str, Path)):
        checkpoint = load_checkpoint(checkpoint)
    if isinstance(checkpoint, LoadedCheckpoint):
        digest, layout = checkpoint.config_digest, checkpoint.layout
        agent = checkpoint.agent
    else:
        agent = checkpoint
    if not isinstance(agent, DVQNAgent):
        raise UsageError(f"Option discovery needs a dvqn checkpoint; got '{agent.kind}', which has no latent.")
    if episodes <= 0:
        raise UsageError(f"episodes must be positive, got {episodes}.")

    if isinstance(checkpoint, LoadedCheckpoint):
        environment = checkpoint_env(env, checkpoint.env_id, layout)
    else:
        environment = make_env(env) if isinstance(env, str) else env
    if environment.obs_dim != agent.obs_dim:
        raise StructuralError(
            f"Checkpoint expects obs_dim={agent.obs_dim}, env '{environment.env_id}' provides {environment.obs_dim}."
        )
    env_rng = rng.split("env")
    records: list[EmbeddingRecord] = []
    for episode in range(episodes):
        observation = environment.reset(env_rng)
        done = False
        while not done:
            x = agent.preprocess(observation)
            mu, q = agent.embed(x)
            label = environment.label()
            result = environment.step(agent.greedy_action(x))
            records.append(
                EmbeddingRecord(mu, q, result.reward, result.done, episode, result.steps_elapsed - 1, label)
            )
            observation, done = result.observation, result.done
    logger.info(
        "embeddings_collected env=%s episodes=%s records=%s", environment.env_id, episodes, len(records)
    )
    return LatentDataset(
        records,
        {
            "env": environment.env_id,
            "checkpoint_digest": digest,
            "seed": rng.seed,
            "episodes": episodes,
            "latent_dim": agent.config.latent_dim,
        },
    )


# ===== Clustering =====


def nearest_centroid(points: np.ndarray, centroids: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Index of the nearest centroid per point (ties to the lowest index) and the squared distance."""

    sq = ((points[:, None, :] - centroids[None, :, :]) ** 2).sum(axis=2)
    index = np.argmin(sq, axis=1)
    return index, sq[np.arange(len(points)), index]


def kmeans_plus_plus(points: np.ndarray, k: int, rng: Rng) -> np.ndarray:
    n = len(points)
    chosen = [int(rng.integers(0, n))]
    sq = ((points - points[chosen[0]]) ** 2).sum(axis=1)
    while len(chosen) < k:
        total = float(sq.sum())
        if total <= 0.0:
            index = int(rng.integers(0, n))
        else:
            index = int(np.searchsorted(np.cumsum(sq), rng.random() * total, side="right"))
            index = min(index, n - 1)
        chosen.append(index)
        sq = np.minimum(sq, ((points - points[index]) ** 2).sum(axis=1))
    return points[chosen].copy()


def _repair_empty(points: np.ndarray, centroids: np.ndarray, assignments: np.ndarray, sq: np.ndarray) -> None:
    """Move the point farthest from its centroid into each empty cluster."""

    k = len(centroids)
    for cluster in range(k):
        sizes = np.bincount(assignments, minlength=k)
        if sizes[cluster] > 0:
            continue
        movable = np.where(sizes[assignments] > 1, sq, -1.0)
        donor = int(np.argmax(movable))
        if movable[donor] < 0:
            return
        centroids[cluster] = points[donor]
        assignments[donor] = cluster
        sq[donor] = 0.0


def _lloyd(points: np.ndarray, centroids: np.ndarray, max_iter: int, tol: float) -> tuple[np.ndarray, float]:
    k = len(centroids)
    previous = np.inf
    for _ in range(max_iter):
        assignments, sq = nearest_centroid(points, centroids)
        _repair_empty(points, centroids, assignments, sq)
        inertia = float(sq.sum())
        if inertia > previous + 1e-9 * max(1.0, previous):
            raise NumericalError(f"k-means inertia increased from {previous} to {inertia}.", node="kmeans")
        previous = inertia
        updated = centroids.copy()
        for cluster in range(k):
            members = points[assignments == cluster]
            if len(members):
                updated[cluster] = members.mean(axis=0)
        movement = float(np.max(np.linalg.norm(updated - centroids, axis=1)))
        centroids = updated
        if movement < tol:
            break
    return centroids, previous


def kmeans(
    data: LatentDataset | np.ndarray,
    k: int,
    rng: Rng,
    restarts: int = KMEANS_RESTARTS,
    max_iter: int = KMEANS_MAX_ITER,
    tol: float = KMEANS_TOL,
) -> ClusterModel:
    """Best-of-``restarts`` k-means with k-means++ seeding; each restart has its own stream."""

    points = _as_points(data)
    if k <= 0 or len(points) < k:
        raise UsageError(f"k-means needs 1 <= k <= record count; got k={k} for {len(points)} records.")

    best: tuple[float, np.ndarray] | None = None
    for restart in range(max(1, restarts)):
        seeds = kmeans_plus_plus(points, k, rng.split(f"restart-{restart}"))
        centroids, _ = _lloyd(points, seeds, max_iter, tol)
        _, sq = nearest_centroid(points, centroids)
        inertia = float(sq.sum())
        logger.debug("kmeans_restart k=%s restart=%s inertia=%.9g", k, restart, inertia)
        if best is None or inertia < best[0]:
            best = (inertia, centroids)

    inertia, centroids = best
    assignments, _ = nearest_centroid(points, centroids)
    return ClusterModel(k, centroids, assignments.astype(np.int64), inertia)


def silhouette(data: LatentDataset | np.ndarray, model: ClusterModel) -> float:
    """Mean silhouette width; singleton clusters contribute 0."""

    points = _as_points(data)
    if model.k < 2:
        raise UsageError("Silhouette is undefined for fewer than 2 clusters.")
    labels = np.asarray(model.assignments)
    if len(labels) != len(points):
        raise StructuralError("Cluster assignments do not match the dataset size.")
    sizes = np.bincount(labels, minlength=model.k).astype(np.float64)
    onehot = np.zeros((len(points), model.k))
    onehot[np.arange(len(points)), labels] = 1.0

    scores = np.zeros(len(points))
    for start in range(0, len(points), SILHOUETTE_CHUNK):
        chunk = points[start : start + SILHOUETTE_CHUNK]
        distances = np.sqrt(((chunk[:, None, :] - points[None, :, :]) ** 2).sum(axis=2))
        sums = distances @ onehot
        own = labels[start : start + len(chunk)]
        for row, cluster in enumerate(own):
            if sizes[cluster] <= 1:
                continue
            a = sums[row, cluster] / (sizes[cluster] - 1)
            others = [sums[row, c] / sizes[c] for c in range(model.k) if c != cluster and sizes[c] > 0]
            if not others:
                continue
            b = min(others)
            denom = max(a, b)
            scores[start + row] = 0.0 if denom == 0 else (b - a) / denom
    return float(scores.mean())


def choose_k(data: LatentDataset | np.ndarray, k_range: Iterable[int] = DEFAULT_K_RANGE, rng: Rng | None = None) -> int:
    """k with the highest silhouette; ties go to the smaller k."""

    points = _as_points(data)
    rng = rng or Rng(0)
    best_k, best_score = None, -np.inf
    for k in sorted(k_range):
        if k < 2 or k > len(points):
            continue
        score = silhouette(points, kmeans(points, k, rng.split(f"k-{k}")))
        logger.info("choose_k_candidate k=%s silhouette=%.6f", k, score)
        if score > best_score:
            best_k, best_score = k, score
    if best_k is None:
        raise UsageError(f"No candidate k is valid for {len(points)} records.")
    return best_k


# ===== Projection =====


@dataclass(frozen=True)
class Projection:
    points: np.ndarray
    explained_ratio: np.ndarray
    components: np.ndarray
    mean: np.ndarray


def jacobi_eigh(matrix: np.ndarray, tol: float = JACOBI_TOL, max_sweeps: int = JACOBI_MAX_SWEEPS) -> tuple[np.ndarray, np.ndarray]:
    """Cyclic Jacobi rotations for a small symmetric matrix; returns (eigenvalues, column eigenvectors)."""

    a = np.array(matrix, dtype=np.float64)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise StructuralError(f"Jacobi needs a square matrix, got shape {a.shape}.")
    d = a.shape[0]
    vectors = np.eye(d)
    scale = max(1.0, float(np.linalg.norm(a)))
    for _ in range(max_sweeps):
        off = float(np.sqrt(max(0.0, (a**2).sum() - (np.diag(a) ** 2).sum())))
        if off <= tol * scale:
            break
        for p in range(d - 1):
            for q in range(p + 1, d):
                if a[p, q] == 0.0:
                    continue
                theta = (a[q, q] - a[p, p]) / (2.0 * a[p, q])
                t = (1.0 if theta >= 0 else -1.0) / (abs(theta) + np.sqrt(theta * theta + 1.0))
                c = 1.0 / np.sqrt(t * t + 1.0)
                s = t * c
                rotation = np.eye(d)
                rotation[p, p] = rotation[q, q] = c
                rotation[p, q] = s
                rotation[q, p] = -s
                a = rotation.T @ a @ rotation
                vectors = vectors @ rotation
    return np.diag(a).copy(), vectors


def pca_project(data: LatentDataset | np.ndarray, target_dim: int = 2) -> Projection:
    points = _as_points(data)
    d = points.shape[1]
    if d < 2 or target_dim > d:
        raise StructuralError(f"PCA to {target_dim} dims needs latent width >= {max(2, target_dim)}, got {d}.")
    mean = points.mean(axis=0)
    centered = points - mean
    covariance = centered.T @ centered / len(points)
    total = float(np.trace(covariance))
    if total <= 0.0:
        raise DegenerateDataError("All latent dimensions have zero variance; nothing to project.")

    if d == 2 and target_dim == 2:
        # already planar: center only, axes keep their meaning
        return Projection(centered, np.diag(covariance) / total, np.eye(2), mean)

    eigenvalues, vectors = jacobi_eigh(covariance)
    order = np.argsort(-eigenvalues, kind="stable")
    eigenvalues = np.clip(eigenvalues[order], 0.0, None)
    vectors = vectors[:, order]
    for column in range(d):
        pivot = int(np.argmax(np.abs(vectors[:, column])))
        if vectors[pivot, column] < 0:
            vectors[:, column] = -vectors[:, column]
    components = vectors[:, :target_dim]
    return Projection(centered @ components, eigenvalues[:target_dim] / total, components, mean)


# ===== Options =====


def derive_options(model: ClusterModel, data: LatentDataset | None = None) -> list[OptionSpec]:
    labels = data.labels() if isinstance(data, LatentDataset) else None
    specs: list[OptionSpec] = []
    for cluster in range(model.k):
        members = model.assignments == cluster
        histogram: dict[int, int] = {}
        if labels is not None:
            values, counts = np.unique(labels[members], return_counts=True)
            histogram = {int(v): int(c) for v, c in zip(values, counts) if v != NO_LABEL}
        specs.append(
            OptionSpec(
                id=cluster,
                centroid=np.array(model.centroids[cluster], dtype=np.float64),
                member_count=int(members.sum()),
                label_histogram=histogram,
            )
        )
    return specs


def assign_option(specs: Sequence[OptionSpec], mu: Any) -> int:
    if not specs:
        raise UsageError("No options to assign.")
    point = np.asarray(mu, dtype=np.float64).reshape(1, -1)
    centroids = np.stack([spec.centroid for spec in specs])
    if centroids.shape[1] != point.shape[1]:
        raise StructuralError(f"mu has width {point.shape[1]}, options use {centroids.shape[1]}.")
    index, _ = nearest_centroid(point, centroids)
    return specs[int(index[0])].id


def replay_terminations(specs: Sequence[OptionSpec], records: Sequence[EmbeddingRecord]) -> list[int]:
    """Positions along one recorded episode at which the active option terminates
    because another centroid became nearest. The episode end always terminates too."""

    active = [assign_option(specs, record.mu) for record in records]
    return [position for position in range(1, len(active)) if active[position] != active[position - 1]]


def label_purity(data: LatentDataset, model: ClusterModel) -> float:
    if not data.has_labels():
        raise UsageError("Label purity needs an env label on every record.")
    labels = data.labels()
    majority = 0
    for cluster in range(model.k):
        members = labels[model.assignments == cluster]
        if len(members):
            majority += int(np.bincount(members).max())
    return majority / len(labels)


def terminal_cluster_coverage(data: LatentDataset, model: ClusterModel) -> float:
    """Share of negative-reward records that sit in clusters whose members are
    mostly negative-reward or terminal."""

    rewards, dones = data.rewards(), data.dones()
    negative = rewards < 0
    if not negative.any():
        raise UsageError("No negative-reward records to cover.")
    flagged = negative | dones
    covered = 0
    for cluster in range(model.k):
        members = model.assignments == cluster
        if members.any() and flagged[members].mean() > 0.5:
            covered += int((negative & members).sum())
    return covered / int(negative.sum())


# ===== Persistence =====


class OptionEntryModel(ConfigModel):
    id: int = Field(ge=0)
    centroid: list[float]
    member_count: int = Field(ge=0)
    label_histogram: dict[int, int] = Field(default_factory=dict)
    initiation: str = "nearest-centroid"
    termination: str = "centroid-change"


class OptionDocumentModel(ConfigModel):
    format_version: int
    metadata: dict[str, Any] = Field(default_factory=dict)
    options: list[OptionEntryModel]


def _plain(value: Any) -> Any:
    if isinstance(value, np.generic):
        return value.item()
    if isinstance(value, np.ndarray):
        return [_plain(item) for item in value.tolist()]
    if isinstance(value, Mapping):
        return {_plain(k): _plain(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_plain(item) for item in value]
    return value


def export_options(specs: Sequence[OptionSpec], path: str | Path, metadata: Mapping[str, Any] | None = None) -> Path:
    document = {
        "format_version": OPTIONS_FORMAT_VERSION,
        "metadata": _plain(dict(metadata or {})),
        "options": [
            {
                "id": spec.id,
                "centroid": [float(value) for value in spec.centroid],
                "member_count": spec.member_count,
                "label_histogram": {int(k): int(v) for k, v in sorted(spec.label_histogram.items())},
                "initiation": spec.initiation,
                "termination": spec.termination,
            }
            for spec in specs
        ],
    }
    target = Path(path)
    target.parent.mkdir(parents=True, exist_ok=True)
    target.write_text(yaml.safe_dump(document, sort_keys=False), encoding="utf-8")
    logger.info("options_exported path=%s options=%s", target, len(specs))
    return target


def load_options(path: str | Path) -> tuple[list[OptionSpec], dict[str, Any]]:
    source = Path(path)
    if not source.is_file():
        raise ConfigError(f"Options file not found: {source}")
    raw = yaml.safe_load(source.read_text(encoding="utf-8"))
    if not isinstance(raw, dict):
        raise ConfigError(f"Options file {source} must contain a mapping.")
    if raw.get("format_version") != OPTIONS_FORMAT_VERSION:
        raise ConfigError(f"Unsupported options format_version {raw.get('format_version')!r} in {source}.")
    document = OptionDocumentModel.parse_document(raw, source=f"options file {source}")
    specs = [
        OptionSpec(
            id=entry.id,
            centroid=np.asarray(entry.centroid, dtype=np.float64),
            member_count=entry.member_count,
            label_histogram=dict(entry.label_histogram),
            initiation=entry.initiation,
            termination=entry.termination,
        )
        for entry in document.options
    ]
    return specs, dict(document.metadata)


def save_dataset(data: LatentDataset, path: str | Path, model: ClusterModel | None = None) -> Path:
    target = Path(path)
    target.parent.mkdir(parents=True, exist_ok=True)
    arrays = {
        "mu": data.points(),
        "q": np.stack([np.asarray(record.q, dtype=np.float64) for record in data.records]),
        "reward": data.rewards(),
        "done": data.dones(),
        "episode": np.array([record.episode for record in data.records], dtype=np.int64),
        "step": np.array([record.step for record in data.records], dtype=np.int64),
        "label": data.labels(),
        "metadata": np.array(json.dumps(_plain(data.metadata), sort_keys=True)),
    }
    if model is not None:
        arrays["assignments"] = model.assignments
        arrays["centroids"] = model.centroids
        arrays["inertia"] = np.array(model.inertia)
    with target.open("wb") as handle:
        np.savez(handle, **arrays)
    return target


def load_dataset(path: str | Path) -> tuple[LatentDataset, ClusterModel | None]:
    source = Path(path)
    if not source.is_file():
        raise UsageError(f"Latent dataset not found: {source}")
    with np.load(source, allow_pickle=False) as archive:
        arrays = {name: archive[name] for name in archive.files}
    labels = arrays["label"]
    records = [
        EmbeddingRecord(
            mu=arrays["mu"][i].copy(),
            q=arrays["q"][i].copy(),
            reward=float(arrays["reward"][i]),
            done=bool(arrays["done"][i]),
            episode=int(arrays["episode"][i]),
            step=int(arrays["step"][i]),
            env_label=None if int(labels[i]) == NO_LABEL else int(labels[i]),
        )
        for i in range(len(arrays["reward"]))
    ]
    model = None
    if "assignments" in arrays:
        centroids = arrays["centroids"]
        model = ClusterModel(len(centroids), centroids, arrays["assignments"].astype(np.int64), float(arrays["inertia"]))
    return LatentDataset(records, json.loads(str(arrays["metadata"]))), model
