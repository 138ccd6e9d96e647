import unittest

from agent_registry import AGENT_PRESETS, FIDELITY_REPLAY_CAPACITY, SUPPORTED_ENVS
from agent_routing import (
    ResolvedRun,
    normalize_agent_kind,
    normalize_env_id,
    observation_scale,
    resolve_agent_config,
    resolve_run,
)
from errors import ConfigError


class NormalizeIdsTestCase(unittest.TestCase):
    def test_reference_ids_are_normalized(self):
        self.assertEqual(normalize_env_id("CartPole-v0"), "cartpole")
        self.assertEqual(normalize_env_id(" Acrobot-v1 "), "acrobot")
        self.assertEqual(normalize_env_id("MiniGrid-SimpleCrossingS9N3-v0"), "crossing")
        self.assertEqual(normalize_env_id("FourRooms-v0"), "fourrooms")

    def test_agent_aliases_are_normalized(self):
        self.assertEqual(normalize_agent_kind("DVQN"), "dvqn")
        self.assertEqual(normalize_agent_kind("deep-q-network"), "dqn")
        self.assertEqual(normalize_agent_kind("double_dqn"), "ddqn")

    def test_unknown_ids_list_supported_values(self):
        with self.assertRaises(ConfigError) as exc:
            normalize_env_id("pong")
        self.assertIn("cartpole", exc.exception.detail)
        with self.assertRaises(ConfigError):
            normalize_agent_kind(None)


class ResolveAgentConfigTestCase(unittest.TestCase):
    def test_dvqn_preset(self):
        config = resolve_agent_config("dvqn")
        self.assertEqual(config.optimizer, "rmsprop")
        self.assertEqual(config.activation, "elu")
        self.assertEqual(config.learning_rate, 0.000025)
        self.assertEqual(config.batch_size, 128)
        self.assertEqual(config.latent_dim, 2)
        self.assertIsNone(config.epsilon_start)

    def test_baseline_presets(self):
        dqn = resolve_agent_config("dqn")
        self.assertEqual((dqn.optimizer, dqn.learning_rate, dqn.batch_size), ("adam", 0.003, 32))
        self.assertEqual((dqn.epsilon_start, dqn.epsilon_end, dqn.epsilon_decay), (1.0, 0.01, 0.001))
        self.assertEqual(resolve_agent_config("ddqn").target_sync_frames, 32_000)

    def test_overrides_merge_over_preset(self):
        config = resolve_agent_config("dvqn", {"activation": "relu", "latent_dim": 3})
        self.assertEqual(config.activation, "relu")
        self.assertEqual(config.latent_dim, 3)
        self.assertEqual(config.optimizer, AGENT_PRESETS["dvqn"]["optimizer"])

    def test_unknown_override_key(self):
        with self.assertRaises(ConfigError) as exc:
            resolve_agent_config("dqn", {"dropout": 0.1})
        self.assertIn("dropout", exc.exception.detail)

    def test_conflicting_kind_override(self):
        with self.assertRaises(ConfigError):
            resolve_agent_config("dvqn", {"kind": "dqn"})
        self.assertEqual(resolve_agent_config("dvqn", {"kind": "DVQN"}).kind, "dvqn")

    def test_invalid_values_are_config_errors(self):
        with self.assertRaises(ConfigError):
            resolve_agent_config("dvqn", {"gamma": 1.5})
        with self.assertRaises(ConfigError):
            resolve_agent_config("dqn", {"epsilon_end": 0.5, "epsilon_start": 0.1})
        with self.assertRaises(ConfigError):
            resolve_agent_config("ddqn", {"target_sync_frames": None})

    def test_fidelity_mode_wins_over_overrides(self):
        config = resolve_agent_config("dvqn", {"replay_capacity": 10, "updates_per_episode": 50}, fidelity_mode=True)
        self.assertEqual(config.replay_capacity, FIDELITY_REPLAY_CAPACITY)
        self.assertEqual(config.updates_per_episode, 1)


class ResolveRunTestCase(unittest.TestCase):
    def test_run_carries_env_shape(self):
        run = resolve_run("FourRooms-v0", "ddqn")
        self.assertIsInstance(run, ResolvedRun)
        self.assertEqual(run["env_id"], "fourrooms")
        self.assertEqual(run["obs_dim"], 4 * 13 * 13)
        self.assertEqual(run["action_count"], 4)
        self.assertEqual(run["score_metric"], "steps")
        self.assertIsNone(run["observation_scale"])
        self.assertEqual(run["agent_config"].kind, "ddqn")

    def test_physics_envs_have_observation_scale(self):
        self.assertEqual(observation_scale("cartpole"), SUPPORTED_ENVS["cartpole"]["observation_scale"])
        self.assertEqual(len(observation_scale("acrobot")), 6)
        self.assertIsNone(observation_scale("crossing"))


if __name__ == "__main__":
    unittest.main()
