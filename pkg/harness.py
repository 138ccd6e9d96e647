"""Experiment orchestration: the training loop, evaluation, multi-trial matrices,
metrics persistence and plots."""

from __future__ import annotations

import csv
import json
import logging
import math
import os
import shutil
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Iterable, Literal, Sequence

import numpy as np
from pydantic import Field

from agent_registry import DEFAULT_AGENT, DEFAULT_ENV, DEFAULT_TRIALS, FINAL_WINDOW, SUPPORTED_ENVS
from agent_routing import normalize_agent_kind, normalize_env_id, resolve_agent_config, resolve_run
from agents import Agent, AgentConfig, LoadedCheckpoint, build_agent, load_checkpoint, save_checkpoint
from envs import Environment, GridWorldEnv, checkpoint_env, make_env
from errors import NumericalError, StructuralError, UsageError
from nnkit import Rng
from options import ClusterModel, LatentDataset, pca_project
from replay import ReplayBuffer, Transition
from schemas import ConfigModel, config_digest, load_yaml_document, to_model_dict

DVQN_LOG_LEVEL = os.getenv("DVQN_LOG_LEVEL", "INFO").strip().upper()
DVQN_OUTPUT_DIR = os.getenv("DVQN_OUTPUT_DIR", "runs")
DVQN_MAX_PARALLELISM = int(os.getenv("DVQN_MAX_PARALLELISM", "4"))
DVQN_FAIL_FAST = os.getenv("DVQN_FAIL_FAST", "false").strip().lower() in {
    "1",
    "true",
    "yes",
    "on",
}
DVQN_CHECKPOINTS = os.getenv("DVQN_CHECKPOINTS", "true").strip().lower() in {
    "1",
    "true",
    "yes",
    "on",
}

METRICS_FILENAME = "metrics.csv"
SUMMARY_FILENAME = "summary.json"
METRICS_COLUMNS = ["trial", "episode", "return", "steps", "recon", "kl", "q_loss", "total_loss", "epsilon"]
SVG_HASH_SALT = "dvqn"

logger = logging.getLogger("dvqn")


# ===== Configuration =====


class ExperimentConfig(ConfigModel):
    env: str = DEFAULT_ENV
    agent: str = DEFAULT_AGENT
    # None: the env's reference episode budget (1500, or 3000 for acrobot).
    episodes: int | None = Field(default=None, gt=0)
    trials: int = Field(default=DEFAULT_TRIALS, gt=0)
    seed: int = Field(default=0, ge=0)
    agent_overrides: dict[str, Any] = Field(default_factory=dict)
    output_dir: str | None = None
    fidelity_mode: bool = False
    parallelism: int = Field(default=1, ge=1)

    def __init__(self, **data: Any):
        super().__init__(**data)
        self.env = normalize_env_id(self.env)
        self.agent = normalize_agent_kind(self.agent)
        # Raises ConfigError for invalid agent_overrides.
        self.agent_config()

    @property
    def episode_budget(self) -> int:
        return self.episodes or SUPPORTED_ENVS[self.env]["reference_episodes"]

    def agent_config(self) -> AgentConfig:
        return resolve_agent_config(self.agent, self.agent_overrides, self.fidelity_mode)

    def digest(self) -> str:
        document = to_model_dict(self)
        document.pop("output_dir", None)
        document.pop("parallelism", None)
        document["episodes"] = self.episode_budget
        document["agent_config"] = to_model_dict(self.agent_config())
        return config_digest(document)


def load_experiment_config(path: str | Path, **cli_overrides: Any) -> ExperimentConfig:
    """YAML document plus non-None CLI overrides (``seed``, ``output_dir``, ``parallelism``)."""

    document = load_yaml_document(path)
    document.update({key: value for key, value in cli_overrides.items() if value is not None})
    return ExperimentConfig.parse_document(document, source=f"experiment config {path}")


def resolve_output_dir(config: ExperimentConfig) -> Path:
    if config.output_dir:
        return Path(config.output_dir)
    return Path(DVQN_OUTPUT_DIR) / f"{config.env}-{config.agent}-seed{config.seed}-{config.digest()}"


# ===== Records =====


@dataclass(frozen=True)
class MetricsRow:
    trial: int
    episode: int
    episode_return: float
    episode_steps: int
    recon: float | None = None
    kl: float | None = None
    q_loss: float | None = None
    total_loss: float | None = None
    epsilon: float | None = None
    aborted: bool = False

    def csv_fields(self) -> list[str]:
        return [
            str(self.trial),
            str(self.episode),
            format_real(self.episode_return),
            str(self.episode_steps),
            format_real(self.recon),
            format_real(self.kl),
            format_real(self.q_loss),
            format_real(self.total_loss),
            format_real(self.epsilon),
        ]


@dataclass
class RunSummary:
    """Training: one final-window mean per trial, mean/std taken across trials.
    Evaluation: a single trial, mean/std taken across episodes."""

    env: str
    agent: str
    config_digest: str
    episodes: int
    trials: int
    window: int
    trial_window_means: list[float]
    mean_return: float
    std_return: float
    mean_steps: float
    aborted_trials: list[int] = field(default_factory=list)
    wall_clock_seconds: float = 0.0
    output_dir: str | None = None
    checkpoints: list[str] = field(default_factory=list)

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)


@dataclass
class TrialResult:
    trial: int
    rows: list[MetricsRow]
    aborted: bool = False
    abort_detail: str | None = None
    checkpoint: str | None = None


def format_real(value: float | None) -> str:
    if value is None:
        return ""
    value = float(value)
    if math.isnan(value):
        return "nan"
    return format(value, ".17g")


def _parse_real(raw: str) -> float | None:
    return None if raw == "" else float(raw)


def read_metrics(path: str | Path) -> list[MetricsRow]:
    source = Path(path)
    if not source.is_file():
        raise UsageError(f"Metrics file not found: {source}")
    with source.open("r", encoding="utf-8", newline="") as handle:
        reader = csv.DictReader(handle)
        if reader.fieldnames != METRICS_COLUMNS:
            raise StructuralError(f"{source} does not have the metrics header {METRICS_COLUMNS}.")
        return [
            MetricsRow(
                trial=int(row["trial"]),
                episode=int(row["episode"]),
                episode_return=float(row["return"]),
                episode_steps=int(row["steps"]),
                recon=_parse_real(row["recon"]),
                kl=_parse_real(row["kl"]),
                q_loss=_parse_real(row["q_loss"]),
                total_loss=_parse_real(row["total_loss"]),
                epsilon=_parse_real(row["epsilon"]),
            )
            for row in reader
        ]


def window_mean(values: Sequence[float], window: int = FINAL_WINDOW) -> float:
    if not values:
        return float("nan")
    return float(np.mean(values[-min(window, len(values)) :]))


# ===== Training =====


def _mean_or_none(values: list[float | None]) -> float | None:
    present = [value for value in values if value is not None]
    return float(np.mean(present)) if present else None


def run_episode(
    agent: Agent,
    env: Environment,
    buffer: ReplayBuffer,
    streams: dict[str, Rng],
    trial: int,
    episode: int,
) -> tuple[MetricsRow, NumericalError | None]:
    """Stochastic-mode rollout storing every transition, then the episode's updates."""

    x = agent.preprocess(env.reset(streams["env"]))
    episode_return, done, steps = 0.0, False, 0
    while not done:
        action = agent.select_action(x, streams["act"])
        result = env.step(action)
        next_x = agent.preprocess(result.observation)
        buffer.push(Transition(x, action, result.reward, next_x, result.done))
        agent.on_frame()
        episode_return += result.reward
        x, done, steps = next_x, result.done, result.steps_elapsed

    planned = steps if agent.config.updates_per_episode is None else agent.config.updates_per_episode
    stats = []
    failure = None
    for _ in range(planned):
        if not buffer.is_warm(agent.config.batch_size):
            break
        try:
            stats.append(agent.update(buffer, streams["train"]))
        except NumericalError as exc:
            failure = exc
            break

    if failure is not None:
        nan = float("nan")
        row = MetricsRow(trial, episode, episode_return, steps, nan, nan, nan, nan, agent.epsilon, aborted=True)
        return row, failure
    row = MetricsRow(
        trial,
        episode,
        episode_return,
        steps,
        recon=_mean_or_none([s.recon for s in stats]),
        kl=_mean_or_none([s.kl for s in stats]),
        q_loss=_mean_or_none([s.q for s in stats]),
        total_loss=_mean_or_none([s.total for s in stats]),
        epsilon=agent.epsilon,
    )
    return row, None


def trial_streams(seed: int, trial: int) -> dict[str, Rng]:
    root = Rng(seed).split(f"trial-{trial}")
    return {name: root.split(name) for name in ("env", "init", "act", "train")}


def _part_path(out_dir: Path, trial: int) -> Path:
    return out_dir / "parts" / f"trial-{trial:04d}.csv"


def run_trial(config: ExperimentConfig, trial: int, out_dir: str | Path) -> TrialResult:
    """One independent trial: fresh env, agent, buffer and streams derived from (seed, trial)."""

    out_dir = Path(out_dir)
    run = resolve_run(config.env, config.agent, config.agent_overrides, config.fidelity_mode)
    agent_config = run["agent_config"]
    env = make_env(run["env_id"])
    streams = trial_streams(config.seed, trial)
    agent = build_agent(
        agent_config, run["obs_dim"], run["action_count"], streams["init"], run["observation_scale"]
    )
    buffer = ReplayBuffer(agent_config.replay_capacity)
    result = TrialResult(trial, [])

    part = _part_path(out_dir, trial)
    part.parent.mkdir(parents=True, exist_ok=True)
    with part.open("w", encoding="utf-8", newline="") as handle:
        writer = csv.writer(handle, lineterminator="\n")
        for episode in range(config.episode_budget):
            row, failure = run_episode(agent, env, buffer, streams, trial, episode)
            writer.writerow(row.csv_fields())
            handle.flush()
            result.rows.append(row)
            if failure is not None:
                result.aborted, result.abort_detail = True, failure.detail
                logger.warning(
                    "trial_aborted trial=%s episode=%s node=%s detail=%s",
                    trial,
                    episode,
                    failure.node,
                    failure.detail,
                )
                if DVQN_FAIL_FAST:
                    raise failure
                break
            logger.debug(
                "episode_complete trial=%s episode=%s return=%s steps=%s",
                trial,
                episode,
                row.episode_return,
                row.episode_steps,
            )

    if DVQN_CHECKPOINTS and not result.aborted:
        layout = env.grid.walls if isinstance(env, GridWorldEnv) else None
        path = save_checkpoint(out_dir / "checkpoints" / f"trial-{trial:04d}.dvqn", agent, config.env, layout)
        result.checkpoint = str(path)
    logger.info(
        "trial_complete env=%s agent=%s trial=%s episodes=%s window_mean=%.4f",
        config.env,
        config.agent,
        trial,
        len(result.rows),
        window_mean([row.episode_return for row in result.rows]),
    )
    return result


def _run_unit(unit: tuple[ExperimentConfig, int, str]) -> TrialResult:
    config, trial, out_dir = unit
    return run_trial(config, trial, out_dir)


def _write_run(config: ExperimentConfig, out_dir: Path, results: list[TrialResult], started: float) -> RunSummary:
    metrics_path = out_dir / METRICS_FILENAME
    with metrics_path.open("w", encoding="utf-8", newline="") as handle:
        handle.write(",".join(METRICS_COLUMNS) + "\n")
        for result in results:
            handle.write(_part_path(out_dir, result.trial).read_text(encoding="utf-8"))
    shutil.rmtree(out_dir / "parts", ignore_errors=True)

    means = [window_mean([row.episode_return for row in result.rows]) for result in results]
    healthy = [mean for mean, result in zip(means, results) if not result.aborted] or means
    steps = [row.episode_steps for result in results for row in result.rows[-FINAL_WINDOW:]]
    summary = RunSummary(
        env=config.env,
        agent=config.agent,
        config_digest=config.digest(),
        episodes=config.episode_budget,
        trials=config.trials,
        window=min(FINAL_WINDOW, config.episode_budget),
        trial_window_means=means,
        mean_return=float(np.mean(healthy)),
        std_return=float(np.std(healthy)),
        mean_steps=float(np.mean(steps)) if steps else float("nan"),
        aborted_trials=[result.trial for result in results if result.aborted],
        wall_clock_seconds=time.perf_counter() - started,
        output_dir=str(out_dir),
        checkpoints=[result.checkpoint for result in results if result.checkpoint],
    )
    (out_dir / SUMMARY_FILENAME).write_text(
        json.dumps(summary.to_dict(), indent=2, sort_keys=True) + "\n", encoding="utf-8"
    )
    logger.info(
        "run_complete env=%s agent=%s trials=%s mean_return=%.4f std_return=%.4f aborted=%s out=%s",
        summary.env,
        summary.agent,
        summary.trials,
        summary.mean_return,
        summary.std_return,
        len(summary.aborted_trials),
        out_dir,
    )
    return summary


def run_matrix(configs: Sequence[ExperimentConfig], parallelism: int = 1) -> list[RunSummary]:
    """Every (config, trial) pair is an independent unit; output matches serial execution."""

    started = time.perf_counter()
    out_dirs = [resolve_output_dir(config) for config in configs]
    for out_dir in out_dirs:
        out_dir.mkdir(parents=True, exist_ok=True)
    units = [
        (config, trial, str(out_dir))
        for config, out_dir in zip(configs, out_dirs)
        for trial in range(config.trials)
    ]
    workers = max(1, min(parallelism, DVQN_MAX_PARALLELISM, len(units)))
    logger.info("matrix_start configs=%s units=%s workers=%s", len(configs), len(units), workers)

    if workers == 1:
        results = [_run_unit(unit) for unit in units]
    else:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_run_unit, units))

    summaries = []
    cursor = 0
    for config, out_dir in zip(configs, out_dirs):
        own = results[cursor : cursor + config.trials]
        cursor += config.trials
        summaries.append(_write_run(config, out_dir, own, started))
    return summaries


def run_training(config: ExperimentConfig) -> RunSummary:
    return run_matrix([config], config.parallelism)[0]


def evaluate(
    checkpoint: LoadedCheckpoint | str | Path,
    env: Environment | str | None,
    episodes: int,
    rng: Rng,
) -> RunSummary:
    """Greedy rollouts: latent mean for DVQN, epsilon = 0 for the baselines."""

    if episodes <= 0:
        raise UsageError(f"episodes must be positive, got {episodes}.")
    loaded = checkpoint if isinstance(checkpoint, LoadedCheckpoint) else load_checkpoint(checkpoint)
    environment = checkpoint_env(env, loaded.env_id, loaded.layout)
    agent = loaded.agent
    if environment.obs_dim != agent.obs_dim or environment.action_count != agent.action_count:
        raise StructuralError(
            f"Checkpoint for '{loaded.env_id}' does not fit env '{environment.env_id}'."
        )

    started = time.perf_counter()
    env_rng = rng.split("env")
    returns, steps = [], []
    for _ in range(episodes):
        x = agent.preprocess(environment.reset(env_rng))
        total, done, result = 0.0, False, None
        while not done:
            result = environment.step(agent.greedy_action(x))
            total += result.reward
            x, done = agent.preprocess(result.observation), result.done
        returns.append(total)
        steps.append(result.steps_elapsed)

    summary = RunSummary(
        env=environment.env_id,
        agent=agent.kind,
        config_digest=loaded.config_digest,
        episodes=episodes,
        trials=1,
        window=episodes,
        trial_window_means=[float(np.mean(returns))],
        mean_return=float(np.mean(returns)),
        std_return=float(np.std(returns)),
        mean_steps=float(np.mean(steps)),
        wall_clock_seconds=time.perf_counter() - started,
    )
    logger.info(
        "evaluation_complete env=%s agent=%s episodes=%s mean_return=%.4f std_return=%.4f",
        summary.env,
        summary.agent,
        episodes,
        summary.mean_return,
        summary.std_return,
    )
    return summary


# ===== Plots =====


def _pyplot():
    import matplotlib

    matplotlib.use("Agg")
    matplotlib.rcParams.update({"svg.hashsalt": SVG_HASH_SALT, "font.family": "DejaVu Sans"})
    import matplotlib.pyplot as plt

    return plt


def _save_svg(fig, out_path: str | Path) -> Path:
    target = Path(out_path)
    target.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(target, format="svg", metadata={"Date": None})
    _pyplot().close(fig)
    return target


def _series_label(path: Path) -> tuple[str, str | None]:
    summary_path = path.parent / SUMMARY_FILENAME
    if summary_path.is_file():
        summary = json.loads(summary_path.read_text(encoding="utf-8"))
        return summary.get("agent", path.parent.name), summary.get("env")
    return path.parent.name or path.stem, None


def curve_statistics(rows: Iterable[MetricsRow], metric: Literal["return", "steps"]) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Per-episode mean and across-trial standard deviation; trials that stopped early drop out."""

    by_trial: dict[int, dict[int, float]] = {}
    for row in rows:
        value = row.episode_return if metric == "return" else float(row.episode_steps)
        by_trial.setdefault(row.trial, {})[row.episode] = value
    if not by_trial:
        raise UsageError("Metrics file has no rows to plot.")
    length = max(max(values) for values in by_trial.values()) + 1
    grid = np.full((len(by_trial), length), np.nan)
    for index, trial in enumerate(sorted(by_trial)):
        for episode, value in by_trial[trial].items():
            grid[index, episode] = value
    counts = np.sum(~np.isnan(grid), axis=0)
    totals = np.nansum(grid, axis=0)
    mean = np.divide(totals, counts, out=np.full(length, np.nan), where=counts > 0)
    spread = np.sqrt(
        np.divide(np.nansum((grid - mean) ** 2, axis=0), counts, out=np.full(length, np.nan), where=counts > 0)
    )
    return np.arange(length), mean, spread


def emit_learning_curve(
    metrics_paths: Sequence[str | Path],
    out_path: str | Path,
    metric: Literal["return", "steps"] | None = None,
) -> Path:
    """Mean return (or steps-to-goal) per episode with a one-std band, one series per file."""

    if not metrics_paths:
        raise UsageError("emit_learning_curve needs at least one metrics file.")
    plt = _pyplot()
    fig, ax = plt.subplots(figsize=(7.0, 4.2), constrained_layout=True)
    envs = set()
    for raw in metrics_paths:
        path = Path(raw)
        label, env = _series_label(path)
        if env:
            envs.add(env)
        chosen = metric or (SUPPORTED_ENVS[env]["score_metric"] if env in SUPPORTED_ENVS else "return")
        episodes, mean, spread = curve_statistics(read_metrics(path), chosen)
        (line,) = ax.plot(episodes, mean, label=label, linewidth=1.2)
        ax.fill_between(episodes, mean - spread, mean + spread, color=line.get_color(), alpha=0.2)
        metric = chosen
    ax.set_xlabel("Episode")
    ax.set_ylabel("Steps to goal" if metric == "steps" else "Episode return")
    if len(envs) == 1:
        ax.set_title(SUPPORTED_ENVS[envs.pop()]["name"])
    ax.grid(True, alpha=0.3)
    ax.legend(loc="best", fontsize=8)
    target = _save_svg(fig, out_path)
    logger.info("plot_written kind=curve path=%s series=%s", target, len(metrics_paths))
    return target


@dataclass
class ScatterGroup:
    label: str
    color_key: int | None
    marker: str
    xs: np.ndarray
    ys: np.ndarray


def scatter_groups(
    dataset: LatentDataset,
    model: ClusterModel | None = None,
    color_by: Literal["cluster", "label", "none"] = "cluster",
    projection: Literal["auto", "raw", "pca"] = "auto",
) -> tuple[list[ScatterGroup], tuple[str, str]]:
    """Point groups for the latent scatter: circles for reward >= 0, crosses below 0."""

    d = dataset.latent_dim
    if projection == "raw" and d != 2:
        raise StructuralError(f"Raw latent scatter needs latent_dim=2, got {d}.")
    if projection == "pca" or (projection == "auto" and d != 2):
        projected = pca_project(dataset)
        points = projected.points
        axes = tuple(f"PC{i + 1} ({ratio:.0%})" for i, ratio in enumerate(projected.explained_ratio))
    else:
        points = dataset.points()
        axes = ("z1", "z2")

    if color_by == "cluster" and model is None:
        color_by = "none"
    if color_by == "cluster":
        keys = np.asarray(model.assignments)
        names = {key: f"option {key}" for key in range(model.k)}
    elif color_by == "label":
        if not dataset.has_labels():
            raise UsageError("color_by='label' needs an env label on every record.")
        keys = dataset.labels()
        label_names = SUPPORTED_ENVS.get(dataset.metadata.get("env"), {}).get("label_names", {})
        names = {int(key): label_names.get(int(key), f"label {key}") for key in np.unique(keys)}
    else:
        keys = np.full(len(dataset), -1)
        names = {-1: "states"}

    positive = dataset.rewards() >= 0
    groups = []
    for key in sorted(names):
        for marker, mask, suffix in (("o", positive, "reward >= 0"), ("x", ~positive, "reward < 0")):
            selected = (keys == key) & mask
            if selected.any():
                groups.append(
                    ScatterGroup(
                        f"{names[key]}, {suffix}",
                        None if key == -1 else int(key),
                        marker,
                        points[selected, 0],
                        points[selected, 1],
                    )
                )
    return groups, axes


def emit_latent_scatter(
    dataset: LatentDataset,
    model: ClusterModel | None,
    out_path: str | Path,
    color_by: Literal["cluster", "label", "none"] = "cluster",
    projection: Literal["auto", "raw", "pca"] = "auto",
) -> Path:
    groups, (x_label, y_label) = scatter_groups(dataset, model, color_by, projection)
    plt = _pyplot()
    palette = plt.get_cmap("tab10")
    fig, ax = plt.subplots(figsize=(6.0, 5.0), constrained_layout=True)
    for group in groups:
        color = "tab:gray" if group.color_key is None else palette(group.color_key % 10)
        ax.scatter(group.xs, group.ys, marker=group.marker, s=10, color=color, label=group.label, linewidths=0.8)
    ax.set_xlabel(x_label)
    ax.set_ylabel(y_label)
    env = dataset.metadata.get("env")
    if env in SUPPORTED_ENVS:
        ax.set_title(f"{SUPPORTED_ENVS[env]['name']} latent space")
    ax.grid(True, alpha=0.3)
    ax.legend(loc="best", fontsize=7, markerscale=1.5)
    target = _save_svg(fig, out_path)
    logger.info("plot_written kind=scatter path=%s points=%s", target, len(dataset))
    return target
