"""DVQN agent (encoder -> Gaussian latent -> decoder + Q-head, joint loss) and the
DQN / Double-DQN baselines."""

from __future__ import annotations

import json
import logging
from abc import ABC, abstractmethod
from dataclasses import dataclass
from pathlib import Path
from typing import Any, ClassVar, Literal, Sequence

import numpy as np
from pydantic import Field

from errors import ConfigError, NumericalError, StructuralError, UsageError
from nnkit import (
    IDENTITY,
    DenseLayer,
    ParamTensor,
    Record,
    Rng,
    Tape,
    OptimizerState,
    backward,
    init_params,
    load_records,
    mlp_forward,
    mse,
    optimizer_step,
    parameter_map,
    parse_activation,
    records_from_params,
    save_records,
)
from replay import Batch, ReplayBuffer, stack_batch
from schemas import ConfigModel, canonical_json, config_digest, to_model_dict

logger = logging.getLogger("dvqn")

AgentKind = Literal["dvqn", "dqn", "ddqn"]
ActMode = Literal["stochastic", "deterministic"]

META_PREFIX = "__meta__."
LAYOUT_RECORD = "__layout__.walls"


# ===== Configuration =====


class AgentConfig(ConfigModel):
    """Hyperparameters for one agent. Presets live in ``agent_registry``."""

    kind: AgentKind = "dvqn"
    gamma: float = Field(default=0.95, ge=0.0, le=1.0)
    learning_rate: float = Field(default=0.000025, gt=0.0)
    batch_size: int = Field(default=128, gt=0)
    optimizer: Literal["rmsprop", "adam"] = "rmsprop"
    activation: Literal["identity", "relu", "elu"] = "elu"
    elu_alpha: float = Field(default=1.0, gt=0.0)
    q_loss: Literal["mse", "huber"] = "mse"
    c1: float = Field(default=1.0, ge=0.0)
    c2: float = Field(default=1.0, ge=0.0)
    epsilon_start: float | None = None
    epsilon_end: float | None = None
    epsilon_decay: float | None = None
    target_sync_frames: int | None = Field(default=None, gt=0)
    latent_dim: int = Field(default=2, gt=0)
    feature_dim: int = Field(default=128, gt=0)
    intermediate_dim: int = Field(default=128, gt=0)
    hidden_dims: list[int] = Field(default_factory=lambda: [64, 64])
    replay_capacity: int = Field(default=100_000, gt=0)
    # None: one update per environment step once warm.
    updates_per_episode: int | None = Field(default=None, ge=0)

    def __init__(self, **data: Any):
        super().__init__(**data)
        schedule = (self.epsilon_start, self.epsilon_end, self.epsilon_decay)
        if self.kind == "dvqn":
            if any(value is not None for value in schedule):
                raise ConfigError("dvqn explores through the latent sample; it takes no epsilon schedule.")
        else:
            if any(value is None for value in schedule):
                raise ConfigError(f"{self.kind} needs epsilon_start, epsilon_end and epsilon_decay.")
            if not 0.0 <= self.epsilon_end <= self.epsilon_start <= 1.0 or self.epsilon_decay < 0:
                raise ConfigError("epsilon schedule must satisfy 0 <= end <= start <= 1, decay >= 0.")
            if any(width <= 0 for width in self.hidden_dims):
                raise ConfigError(f"hidden_dims must be positive, got {self.hidden_dims}.")
        if self.kind == "ddqn" and self.target_sync_frames is None:
            raise ConfigError("ddqn needs target_sync_frames.")


# ===== Models =====


@dataclass(frozen=True)
class GaussianLatent:
    mu: np.ndarray
    logvar: np.ndarray

    @property
    def std(self) -> np.ndarray:
        return np.exp(0.5 * self.logvar)


@dataclass(eq=False)
class DVQNModel:
    feature: DenseLayer
    intermediate: DenseLayer
    mu_head: DenseLayer
    logvar_head: DenseLayer
    decoder: list[DenseLayer]
    q_head: list[DenseLayer]

    def __post_init__(self) -> None:
        if self.mu_head.in_features != self.logvar_head.in_features:
            raise StructuralError("mu and logvar heads must share their input width.")
        if self.mu_head.out_features != self.logvar_head.out_features:
            raise StructuralError("mu and logvar heads must share the latent width.")
        if self.decoder[-1].out_features != self.obs_dim:
            raise StructuralError("decoder output width must equal obs_dim.")

    @property
    def obs_dim(self) -> int:
        return self.feature.in_features

    @property
    def latent_dim(self) -> int:
        return self.mu_head.out_features

    @property
    def intermediate_dim(self) -> int:
        return self.intermediate.out_features

    @property
    def action_count(self) -> int:
        return self.q_head[-1].out_features

    def layers(self) -> list[DenseLayer]:
        return [self.feature, self.intermediate, self.mu_head, self.logvar_head, *self.decoder, *self.q_head]

    def parameters(self) -> dict[str, ParamTensor]:
        return parameter_map(self.layers())


@dataclass(eq=False)
class QNetwork:
    """Baseline network: observation -> ReLU hidden layers -> Q-values."""

    layers: list[DenseLayer]

    @property
    def obs_dim(self) -> int:
        return self.layers[0].in_features

    @property
    def action_count(self) -> int:
        return self.layers[-1].out_features

    def parameters(self) -> dict[str, ParamTensor]:
        return parameter_map(self.layers)

    def copy(self) -> "QNetwork":
        return QNetwork(
            [
                DenseLayer(layer.name, layer.weights.copy(), layer.bias.copy(), layer.activation)
                for layer in self.layers
            ]
        )


def build_dvqn_model(obs_dim: int, action_count: int, config: AgentConfig, rng: Rng) -> DVQNModel:
    act = parse_activation(config.activation, config.elu_alpha)
    f, h, d = config.feature_dim, config.intermediate_dim, config.latent_dim
    return DVQNModel(
        feature=init_params([obs_dim, f], rng, name="feature", activations=[act])[0],
        intermediate=init_params([f, h], rng, name="intermediate", activations=[act])[0],
        mu_head=init_params([h, d], rng, name="mu_head", activations=[IDENTITY])[0],
        logvar_head=init_params([h, d], rng, name="logvar_head", activations=[IDENTITY])[0],
        decoder=init_params([d, h, obs_dim], rng, name="decoder", activations=[act, IDENTITY]),
        q_head=init_params([d, h, action_count], rng, name="q_head", activations=[act, IDENTITY]),
    )


def build_q_network(obs_dim: int, action_count: int, config: AgentConfig, rng: Rng) -> QNetwork:
    act = parse_activation(config.activation, config.elu_alpha)
    sizes = [obs_dim, *config.hidden_dims, action_count]
    activations = [act] * len(config.hidden_dims) + [IDENTITY]
    return QNetwork(init_params(sizes, rng, name="q_net", activations=activations))


# ===== DVQN operations =====


def encode(model: DVQNModel, s: Any) -> GaussianLatent:
    arr = np.asarray(s, dtype=np.float64)
    if arr.ndim not in (1, 2) or arr.shape[-1] != model.obs_dim:
        raise StructuralError(f"encode expects obs_dim={model.obs_dim}, got shape {arr.shape}.")
    hidden = mlp_forward([model.feature, model.intermediate], arr)
    return GaussianLatent(mlp_forward([model.mu_head], hidden), mlp_forward([model.logvar_head], hidden))


def sample_latent(g: GaussianLatent, eps: Any = None) -> np.ndarray:
    """``z = mu + exp(logvar / 2) * eps``; ``eps=None`` means the all-zero draw."""

    if eps is None:
        return g.mu.copy()
    noise = np.asarray(eps, dtype=np.float64)
    if noise.shape != g.mu.shape:
        raise StructuralError(f"eps shape {noise.shape} does not match mu {g.mu.shape}.")
    return g.mu + g.std * noise


def decode(model: DVQNModel, z: Any) -> np.ndarray:
    return mlp_forward(model.decoder, z)


def q_values(model: DVQNModel, z: Any) -> np.ndarray:
    return mlp_forward(model.q_head, z)


def greedy_index(q: np.ndarray) -> int:
    # np.argmax returns the first maximum, so ties go to the lowest action.
    return int(np.argmax(q))


def act(model: DVQNModel, s: Any, mode: ActMode, rng: Rng | None = None) -> int:
    latent = encode(model, s)
    if mode == "stochastic":
        if rng is None:
            raise UsageError("stochastic action selection needs an rng.")
        z = sample_latent(latent, rng.normal(size=latent.mu.shape))
    else:
        z = sample_latent(latent)
    return greedy_index(q_values(model, z))


def kl_divergence(g: GaussianLatent) -> float:
    """KL to the standard normal prior; batch inputs are averaged over rows."""

    per_sample = -0.5 * np.sum(1.0 + g.logvar - g.mu**2 - np.exp(g.logvar), axis=-1)
    return float(np.mean(per_sample))


def vae_loss(s: Any, s_hat: Any, g: GaussianLatent) -> tuple[float, float]:
    return mse(s, s_hat), kl_divergence(g)


@dataclass(frozen=True)
class LossBreakdown:
    recon: float
    kl: float
    q: float
    total: float
    c1: float
    c2: float


def total_loss(recon: float, kl: float, q: float, c1: float, c2: float) -> LossBreakdown:
    return LossBreakdown(recon, kl, q, c1 * (recon + kl) + c2 * q, c1, c2)


def dvqn_targets(model: DVQNModel, batch: Batch, gamma: float) -> np.ndarray:
    """``y = r + gamma * Q(z', argmax_a' Q(z', a'))`` with ``z' = mu(s')``, same parameters
    for selection and evaluation; ``y = r`` on terminal transitions."""

    next_q = q_values(model, encode(model, batch.next_states).mu)
    best = np.argmax(next_q, axis=1)
    bootstrap = next_q[np.arange(len(batch)), best]
    return np.where(batch.dones, batch.rewards, batch.rewards + gamma * bootstrap)


@dataclass
class DVQNTrace:
    tape: Tape
    recon: Any
    kl: Any
    q_loss: Any
    total: Any
    targets: Any


def trace_dvqn_loss(
    model: DVQNModel,
    batch: Batch,
    targets: np.ndarray,
    eps: np.ndarray,
    c1: float,
    c2: float,
    tape: Tape | None = None,
) -> DVQNTrace:
    """One joint forward pass through the shared encoder, recorded for backward."""

    tape = tape or Tape()
    states = tape.constant(batch.states, "states")
    hidden = tape.mlp([model.feature, model.intermediate], states)
    mu = tape.dense(model.mu_head, hidden)
    logvar = tape.dense(model.logvar_head, hidden)
    z = tape.reparameterize(mu, logvar, eps)
    reconstruction = tape.mlp(model.decoder, z)
    recon = tape.mse(reconstruction, states, "recon")
    kl = tape.kl_standard_normal(mu, logvar)
    chosen_q = tape.gather(tape.mlp(model.q_head, z), batch.actions, "q_sa")
    target_node = tape.constant(targets, "q_target")
    q_loss = tape.mse(chosen_q, target_node, "q_loss")
    vae = tape.add(recon, kl, "vae")
    total = tape.linear_combination([(c1, vae), (c2, q_loss)], "total")
    return DVQNTrace(tape, recon, kl, q_loss, total, target_node)


def q_loss_dvqn(model: DVQNModel, batch: Batch, gamma: float, eps: np.ndarray | None = None) -> float:
    if eps is None:
        eps = np.zeros((len(batch), model.latent_dim))
    trace = trace_dvqn_loss(model, batch, dvqn_targets(model, batch, gamma), eps, 1.0, 1.0)
    return trace.q_loss.item()


def _raise_on_non_finite(tape: Tape, root: Any) -> None:
    if np.all(np.isfinite(root.value)):
        return
    culprit = next(
        (node.name for node in tape.nodes if not np.all(np.isfinite(node.value))), root.name
    )
    raise NumericalError(f"Loss became non-finite at node '{culprit}'.", node=culprit)


def train_step_dvqn(
    model: DVQNModel,
    buffer: ReplayBuffer,
    state: OptimizerState,
    config: AgentConfig,
    rng: Rng,
) -> LossBreakdown:
    """Sample a batch, one joint forward, one backward, one update over all parameters."""

    batch = stack_batch(buffer.sample(config.batch_size, rng))
    eps = rng.normal(size=(len(batch), model.latent_dim))
    trace = trace_dvqn_loss(
        model, batch, dvqn_targets(model, batch, config.gamma), eps, config.c1, config.c2
    )
    _raise_on_non_finite(trace.tape, trace.total)
    grads = backward(trace.tape, trace.total)
    optimizer_step(model.parameters(), grads, state)
    return total_loss(trace.recon.item(), trace.kl.item(), trace.q_loss.item(), config.c1, config.c2)


# ===== Baselines =====


def baseline_q_values(model: QNetwork, s: Any) -> np.ndarray:
    arr = np.asarray(s, dtype=np.float64)
    if arr.shape[-1] != model.obs_dim:
        raise StructuralError(f"Q-network expects obs_dim={model.obs_dim}, got shape {arr.shape}.")
    return mlp_forward(model.layers, arr)


def act_baseline(model: QNetwork, s: Any, epsilon: float, rng: Rng) -> int:
    if rng.random() < epsilon:
        return int(rng.integers(0, model.action_count))
    return greedy_index(baseline_q_values(model, s))


def epsilon_at(frames: int, config: AgentConfig) -> float:
    """Linear decay per environment step, frozen at ``epsilon_end``."""

    return max(config.epsilon_end, config.epsilon_start - config.epsilon_decay * frames)


def dqn_targets(model: QNetwork, batch: Batch, gamma: float) -> np.ndarray:
    bootstrap = baseline_q_values(model, batch.next_states).max(axis=1)
    return np.where(batch.dones, batch.rewards, batch.rewards + gamma * bootstrap)


def ddqn_targets(online: QNetwork, target: QNetwork, batch: Batch, gamma: float) -> np.ndarray:
    best = np.argmax(baseline_q_values(online, batch.next_states), axis=1)
    evaluated = baseline_q_values(target, batch.next_states)[np.arange(len(batch)), best]
    return np.where(batch.dones, batch.rewards, batch.rewards + gamma * evaluated)


def _baseline_update(
    model: QNetwork, batch: Batch, targets: np.ndarray, state: OptimizerState, config: AgentConfig
) -> float:
    tape = Tape()
    chosen_q = tape.gather(tape.mlp(model.layers, tape.constant(batch.states, "states")), batch.actions, "q_sa")
    target_node = tape.constant(targets, "q_target")
    if config.q_loss == "huber":
        loss = tape.huber(chosen_q, target_node, name="q_loss")
    else:
        loss = tape.mse(chosen_q, target_node, "q_loss")
    _raise_on_non_finite(tape, loss)
    optimizer_step(model.parameters(), backward(tape, loss), state)
    return loss.item()


def train_step_dqn(
    model: QNetwork, buffer: ReplayBuffer, state: OptimizerState, config: AgentConfig, rng: Rng
) -> float:
    batch = stack_batch(buffer.sample(config.batch_size, rng))
    return _baseline_update(model, batch, dqn_targets(model, batch, config.gamma), state, config)


def train_step_ddqn(
    model: QNetwork,
    target: QNetwork,
    buffer: ReplayBuffer,
    state: OptimizerState,
    config: AgentConfig,
    rng: Rng,
) -> float:
    batch = stack_batch(buffer.sample(config.batch_size, rng))
    targets = ddqn_targets(model, target, batch, config.gamma)
    return _baseline_update(model, batch, targets, state, config)


def sync_target(online: QNetwork, target: QNetwork) -> None:
    target_params = target.parameters()
    for name, tensor in online.parameters().items():
        target_params[name].values[...] = tensor.values


# ===== Agent wrappers =====


@dataclass(frozen=True)
class UpdateStats:
    """Per-update losses as surfaced in the metrics file; VAE terms are DVQN-only."""

    q: float
    total: float
    recon: float | None = None
    kl: float | None = None


class Agent(ABC):
    kind: ClassVar[str]

    def __init__(
        self,
        config: AgentConfig,
        obs_dim: int,
        action_count: int,
        rng: Rng,
        observation_scale: Sequence[float] | None = None,
    ) -> None:
        self.config = config
        self.obs_dim = obs_dim
        self.action_count = action_count
        self.frames = 0
        scale = np.ones(obs_dim) if observation_scale is None else np.asarray(observation_scale, dtype=np.float64)
        if scale.shape != (obs_dim,) or np.any(scale <= 0):
            raise StructuralError(f"observation_scale must be {obs_dim} positive values.")
        self.observation_scale = scale
        self.optimizer = OptimizerState(config.optimizer, config.learning_rate)
        self._build(rng)

    @abstractmethod
    def _build(self, rng: Rng) -> None: ...

    @abstractmethod
    def parameters(self) -> dict[str, ParamTensor]: ...

    @abstractmethod
    def select_action(self, x: np.ndarray, rng: Rng) -> int:
        """Exploration-mode action for a preprocessed observation."""

    @abstractmethod
    def greedy_action(self, x: np.ndarray) -> int: ...

    @abstractmethod
    def update(self, buffer: ReplayBuffer, rng: Rng) -> UpdateStats: ...

    @property
    def epsilon(self) -> float | None:
        return None

    def preprocess(self, observation: Any) -> np.ndarray:
        return np.asarray(observation, dtype=np.float64) / self.observation_scale

    def on_frame(self) -> None:
        self.frames += 1


class DVQNAgent(Agent):
    kind = "dvqn"

    def _build(self, rng: Rng) -> None:
        self.model = build_dvqn_model(self.obs_dim, self.action_count, self.config, rng)

    def parameters(self) -> dict[str, ParamTensor]:
        return self.model.parameters()

    def select_action(self, x: np.ndarray, rng: Rng) -> int:
        return act(self.model, x, "stochastic", rng)

    def greedy_action(self, x: np.ndarray) -> int:
        return act(self.model, x, "deterministic")

    def embed(self, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Deterministic latent mean and its Q-values."""

        mu = encode(self.model, x).mu
        return mu, q_values(self.model, mu)

    def update(self, buffer: ReplayBuffer, rng: Rng) -> UpdateStats:
        losses = train_step_dvqn(self.model, buffer, self.optimizer, self.config, rng)
        return UpdateStats(q=losses.q, total=losses.total, recon=losses.recon, kl=losses.kl)


class DQNAgent(Agent):
    kind = "dqn"

    def _build(self, rng: Rng) -> None:
        self.model = build_q_network(self.obs_dim, self.action_count, self.config, rng)

    def parameters(self) -> dict[str, ParamTensor]:
        return self.model.parameters()

    @property
    def epsilon(self) -> float:
        return epsilon_at(self.frames, self.config)

    def select_action(self, x: np.ndarray, rng: Rng) -> int:
        return act_baseline(self.model, x, self.epsilon, rng)

    def greedy_action(self, x: np.ndarray) -> int:
        return greedy_index(baseline_q_values(self.model, x))

    def update(self, buffer: ReplayBuffer, rng: Rng) -> UpdateStats:
        loss = train_step_dqn(self.model, buffer, self.optimizer, self.config, rng)
        return UpdateStats(q=loss, total=loss)


class DDQNAgent(DQNAgent):
    kind = "ddqn"

    def _build(self, rng: Rng) -> None:
        super()._build(rng)
        self.target = self.model.copy()

    def on_frame(self) -> None:
        super().on_frame()
        if self.frames % self.config.target_sync_frames == 0:
            sync_target(self.model, self.target)
            logger.debug("target_synced frames=%s", self.frames)

    def update(self, buffer: ReplayBuffer, rng: Rng) -> UpdateStats:
        loss = train_step_ddqn(self.model, self.target, buffer, self.optimizer, self.config, rng)
        return UpdateStats(q=loss, total=loss)


AGENT_CLASSES: dict[str, type[Agent]] = {
    DVQNAgent.kind: DVQNAgent,
    DQNAgent.kind: DQNAgent,
    DDQNAgent.kind: DDQNAgent,
}


def build_agent(
    config: AgentConfig,
    obs_dim: int,
    action_count: int,
    rng: Rng,
    observation_scale: Sequence[float] | None = None,
) -> Agent:
    return AGENT_CLASSES[config.kind](config, obs_dim, action_count, rng, observation_scale)


# ===== Checkpoints =====


@dataclass
class LoadedCheckpoint:
    agent: Agent
    env_id: str
    config_digest: str
    path: Path
    layout: np.ndarray | None = None

    @property
    def kind(self) -> str:
        return self.agent.kind


def _meta_record(key: str, value: str) -> Record:
    return Record(f"{META_PREFIX}{key}={value}", (0,), np.zeros(0))


def save_checkpoint(path: str | Path, agent: Agent, env_id: str, layout: np.ndarray | None = None) -> Path:
    """``layout`` is the gridworld wall grid the agent trained on, restored at load time."""

    config = to_model_dict(agent.config)
    meta = {
        "agent_kind": agent.kind,
        "env_id": env_id,
        "config_digest": config_digest(config),
        "config": canonical_json(config),
        "obs_dim": str(agent.obs_dim),
        "action_count": str(agent.action_count),
        "observation_scale": canonical_json([float(v) for v in agent.observation_scale]),
    }
    records = [_meta_record(key, value) for key, value in meta.items()]
    records.extend(records_from_params(agent.parameters()))
    if layout is not None:
        walls = np.asarray(layout, dtype=np.float64)
        records.append(Record(LAYOUT_RECORD, walls.shape, walls))
    return save_records(path, records)


def load_checkpoint(path: str | Path) -> LoadedCheckpoint:
    records = load_records(path)
    meta: dict[str, str] = {}
    values: dict[str, Record] = {}
    for record in records:
        if record.name.startswith(META_PREFIX):
            key, _, value = record.name[len(META_PREFIX) :].partition("=")
            meta[key] = value
        else:
            values[record.name] = record
    missing = {"agent_kind", "env_id", "config", "obs_dim", "action_count"} - set(meta)
    if missing:
        raise StructuralError(f"Checkpoint {path} is missing metadata: {sorted(missing)}.")

    config = AgentConfig.parse_document(json.loads(meta["config"]), source="checkpoint config")
    scale = json.loads(meta["observation_scale"]) if "observation_scale" in meta else None
    agent = build_agent(config, int(meta["obs_dim"]), int(meta["action_count"]), Rng(0), scale)
    for name, tensor in agent.parameters().items():
        record = values.get(name)
        if record is None:
            raise StructuralError(f"Checkpoint {path} has no record for parameter '{name}'.")
        if tuple(record.shape) != tensor.shape:
            raise StructuralError(
                f"Checkpoint record '{name}' has shape {record.shape}, expected {tensor.shape}."
            )
        tensor.values[...] = record.values
    if isinstance(agent, DDQNAgent):
        sync_target(agent.model, agent.target)
    layout = values.get(LAYOUT_RECORD)
    walls = None if layout is None else layout.values > 0.5
    return LoadedCheckpoint(agent, meta["env_id"], meta.get("config_digest", ""), Path(path), walls)
