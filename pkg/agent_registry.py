"""Central catalog of test-bed environments and per-algorithm hyperparameter presets."""

from __future__ import annotations

import math

DEFAULT_AGENT = "dvqn"
DEFAULT_ENV = "cartpole"

DEFAULT_TRIALS = 5
FINAL_WINDOW = 100

DESK_REPLAY_CAPACITY = 100_000
FIDELITY_REPLAY_CAPACITY = 1_000_000

SUPPORTED_ENVS = {
    "cartpole": {
        "name": "CartPole",
        "reference_id": "CartPole-v0",
        "obs_dim": 4,
        "action_count": 2,
        "max_steps": 200,
        "reference_episodes": 1500,
        "score_metric": "return",
        # x / 2.4 m, x_dot / 5, theta / 0.21 rad, omega / 5
        "observation_scale": [2.4, 5.0, 0.21, 5.0],
        "label_names": {0: "left", 1: "center", 2: "right"},
    },
    "acrobot": {
        "name": "Acrobot",
        "reference_id": "Acrobot-v1",
        "obs_dim": 6,
        "action_count": 3,
        "max_steps": 500,
        "reference_episodes": 3000,
        "score_metric": "return",
        "observation_scale": [1.0, 1.0, 1.0, 1.0, 4 * math.pi, 9 * math.pi],
        "label_names": {},
    },
    "crossing": {
        "name": "Crossing 9x9, 3 walls",
        "reference_id": "CrossingS9N3-v0",
        "obs_dim": 4 * 9 * 9,
        "action_count": 4,
        "max_steps": 400,
        "reference_episodes": 1500,
        "score_metric": "steps",
        "observation_scale": None,
        "label_names": {0: "top-left", 1: "top-right", 2: "bottom-left", 3: "bottom-right"},
    },
    "fourrooms": {
        "name": "Four Rooms 13x13",
        "reference_id": "FourRooms-v0",
        "obs_dim": 4 * 13 * 13,
        "action_count": 4,
        "max_steps": 400,
        "reference_episodes": 1500,
        "score_metric": "steps",
        "observation_scale": None,
        "label_names": {
            0: "top-left room",
            1: "top-right room",
            2: "bottom-left room",
            3: "bottom-right room",
            4: "doorway",
        },
    },
}

ENV_ALIASES = {
    "cartpole-v0": "cartpole",
    "cart-pole": "cartpole",
    "acrobot-v1": "acrobot",
    "crossings9n3-v0": "crossing",
    "minigrid-simplecrossings9n3-v0": "crossing",
    "simplecrossing": "crossing",
    "fourrooms-v0": "fourrooms",
    "minigrid-fourrooms-v0": "fourrooms",
    "four-rooms": "fourrooms",
}

AGENT_ALIASES = {
    "deep-variational-q-network": "dvqn",
    "deep-q-network": "dqn",
    "double-dqn": "ddqn",
    "double_dqn": "ddqn",
}

_BASELINE_PRESET = {
    "gamma": 0.95,
    "learning_rate": 0.003,
    "batch_size": 32,
    "optimizer": "adam",
    "activation": "relu",
    "q_loss": "huber",
    "epsilon_start": 1.0,
    "epsilon_end": 0.01,
    "epsilon_decay": 0.001,
    "hidden_dims": [64, 64],
    "replay_capacity": DESK_REPLAY_CAPACITY,
    "updates_per_episode": None,
}

AGENT_PRESETS = {
    "dvqn": {
        "kind": "dvqn",
        "gamma": 0.95,
        "learning_rate": 0.000025,
        "batch_size": 128,
        "optimizer": "rmsprop",
        "activation": "elu",
        "elu_alpha": 1.0,
        "q_loss": "mse",
        "c1": 1.0,
        "c2": 1.0,
        "latent_dim": 2,
        "feature_dim": 128,
        "intermediate_dim": 128,
        "replay_capacity": DESK_REPLAY_CAPACITY,
        "updates_per_episode": None,
    },
    "dqn": {"kind": "dqn", **_BASELINE_PRESET},
    "ddqn": {"kind": "ddqn", "target_sync_frames": 32_000, **_BASELINE_PRESET},
}
