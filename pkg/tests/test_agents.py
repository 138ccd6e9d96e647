import math
import tempfile
import unittest
from pathlib import Path

import numpy as np

from agent_routing import resolve_agent_config
from agents import (
    DDQNAgent,
    DQNAgent,
    DVQNAgent,
    DVQNModel,
    GaussianLatent,
    QNetwork,
    act,
    act_baseline,
    build_agent,
    build_dvqn_model,
    ddqn_targets,
    dqn_targets,
    dvqn_targets,
    encode,
    epsilon_at,
    kl_divergence,
    load_checkpoint,
    q_loss_dvqn,
    q_values,
    sample_latent,
    save_checkpoint,
    total_loss,
    trace_dvqn_loss,
    train_step_dvqn,
    vae_loss,
)
from errors import ConfigError, StructuralError, UsageError
from nnkit import IDENTITY, DenseLayer, OptimizerState, ParamTensor, Rng, backward, finite_difference_check
from replay import Batch, ReplayBuffer, Transition, stack_batch


def _layer(name, weights, bias, activation=IDENTITY):
    return DenseLayer(
        name,
        ParamTensor(f"{name}.weight", np.asarray(weights, dtype=float)),
        ParamTensor(f"{name}.bias", np.asarray(bias, dtype=float)),
        activation,
    )


def _constant_q_model(q, logvar_bias=0.0):
    """1-D observation model whose Q-head ignores z and returns ``q``."""

    return DVQNModel(
        feature=_layer("feature.0", [[1.0]], [0.0]),
        intermediate=_layer("intermediate.0", [[1.0]], [0.0]),
        mu_head=_layer("mu_head.0", [[1.0]], [0.0]),
        logvar_head=_layer("logvar_head.0", [[0.0]], [logvar_bias]),
        decoder=[_layer("decoder.0", [[1.0]], [0.0]), _layer("decoder.1", [[1.0]], [0.0])],
        q_head=[_layer("q_head.0", [[0.0]], [0.0]), _layer("q_head.1", np.zeros((len(q), 1)), q)],
    )


def _small_config(**overrides):
    values = {"feature_dim": 8, "intermediate_dim": 8, "batch_size": 8, "learning_rate": 0.001}
    values.update(overrides)
    return resolve_agent_config("dvqn", values)


def _filled_buffer(obs_dim, action_count, count, seed=0):
    rng = Rng(seed)
    buffer = ReplayBuffer(100)
    for _ in range(count):
        buffer.push(
            Transition(
                rng.normal(size=obs_dim),
                int(rng.integers(0, action_count)),
                float(rng.normal()),
                rng.normal(size=obs_dim),
                bool(rng.random() < 0.2),
            )
        )
    return buffer


class LatentMathTestCase(unittest.TestCase):
    def test_sample_latent_examples(self):
        g = GaussianLatent(np.array([0.0]), np.array([0.0]))
        np.testing.assert_allclose(sample_latent(g, [1.0]), [1.0])
        g = GaussianLatent(np.array([2.0]), np.array([2.0 * math.log(3.0)]))
        np.testing.assert_allclose(sample_latent(g, [-1.0]), [-1.0], atol=1e-12)
        np.testing.assert_array_equal(sample_latent(g), g.mu)

    def test_sample_latent_shape_mismatch(self):
        with self.assertRaises(StructuralError):
            sample_latent(GaussianLatent(np.zeros(2), np.zeros(2)), np.zeros(3))

    def test_reparameterized_samples_match_moments(self):
        g = GaussianLatent(np.array([3.0]), np.array([math.log(4.0)]))
        draws = sample_latent(
            GaussianLatent(np.full((100_000, 1), 3.0), np.full((100_000, 1), math.log(4.0))),
            Rng(11).normal(size=(100_000, 1)),
        )
        self.assertLess(abs(draws.mean() - 3.0) / 3.0, 0.02)
        self.assertLess(abs(draws.std() - float(g.std[0])) / float(g.std[0]), 0.02)

    def test_kl_examples(self):
        self.assertEqual(kl_divergence(GaussianLatent(np.zeros(2), np.zeros(2))), 0.0)
        self.assertAlmostEqual(kl_divergence(GaussianLatent(np.array([1.0]), np.array([0.0]))), 0.5)
        self.assertAlmostEqual(
            kl_divergence(GaussianLatent(np.array([0.0]), np.array([math.log(4.0)]))),
            -0.5 * (1 + math.log(4.0) - 4.0),
        )

    def test_kl_is_nonnegative(self):
        rng = Rng(2)
        mu = rng.normal(size=(10_000, 3)) * 3.0
        logvar = rng.uniform(-10.0, 5.0, size=(10_000, 3))
        per_sample = -0.5 * np.sum(1.0 + logvar - mu**2 - np.exp(logvar), axis=1)
        self.assertGreaterEqual(per_sample.min(), -1e-12)
        self.assertGreaterEqual(kl_divergence(GaussianLatent(mu, logvar)), -1e-12)

    def test_total_loss_decomposition(self):
        self.assertAlmostEqual(total_loss(0.2, 0.3, 0.5, 1.0, 1.0).total, 1.0)
        self.assertAlmostEqual(total_loss(0.2, 0.3, 0.5, 1.0, 0.0).total, 0.5)
        self.assertAlmostEqual(total_loss(0.2, 0.3, 0.5, 0.0, 1.0).total, 0.5)

    def test_vae_loss_averages_the_batch(self):
        s = np.array([[1.0, 0.0], [0.0, 0.0]])
        s_hat = np.zeros((2, 2))
        g = GaussianLatent(np.array([[1.0], [0.0]]), np.zeros((2, 1)))
        recon, kl = vae_loss(s, s_hat, g)
        self.assertAlmostEqual(recon, 0.25)
        self.assertAlmostEqual(kl, 0.25)


class DVQNModelTestCase(unittest.TestCase):
    def setUp(self):
        self.config = _small_config()
        self.model = build_dvqn_model(4, 2, self.config, Rng(0))

    def test_encode_is_deterministic_with_latent_width(self):
        s = np.array([0.1, -0.2, 0.3, 0.0])
        first, second = encode(self.model, s), encode(self.model, s)
        self.assertEqual(first.mu.shape, (2,))
        np.testing.assert_array_equal(first.mu, second.mu)
        np.testing.assert_array_equal(first.logvar, second.logvar)

    def test_encode_rejects_wrong_width(self):
        with self.assertRaises(StructuralError):
            encode(self.model, np.zeros(3))

    def test_q_values_length(self):
        self.assertEqual(q_values(self.model, np.zeros(2)).shape, (2,))

    def test_model_invariants(self):
        self.assertEqual(self.model.latent_dim, 2)
        self.assertEqual(self.model.intermediate_dim, 8)
        self.assertEqual(self.model.action_count, 2)
        with self.assertRaises(StructuralError):
            DVQNModel(
                self.model.feature,
                self.model.intermediate,
                self.model.mu_head,
                self.model.logvar_head,
                self.model.decoder[:1],
                self.model.q_head,
            )

    def test_tie_breaks_to_lowest_action(self):
        model = _constant_q_model([1.0, 1.0])
        self.assertEqual(act(model, [0.3], "deterministic"), 0)

    def test_collapsed_variance_makes_stochastic_match_deterministic(self):
        model = build_dvqn_model(4, 3, self.config, Rng(4))
        model.logvar_head.weights.values[:] = 0.0
        model.logvar_head.bias.values[:] = -40.0
        rng = Rng(5)
        for _ in range(50):
            s = rng.normal(size=4)
            self.assertEqual(act(model, s, "stochastic", rng), act(model, s, "deterministic"))

    def test_stochastic_mode_needs_rng(self):
        with self.assertRaises(UsageError):
            act(self.model, np.zeros(4), "stochastic")


class DVQNTargetTestCase(unittest.TestCase):
    def _batch(self, reward, done):
        return Batch(
            states=np.zeros((1, 1)),
            actions=np.array([1]),
            rewards=np.array([reward]),
            next_states=np.zeros((1, 1)),
            dones=np.array([done]),
        )

    def test_bootstrap_target_example(self):
        model = _constant_q_model([2.0, 3.0])
        np.testing.assert_allclose(dvqn_targets(model, self._batch(1.0, False), 0.95), [3.85])

    def test_terminal_target_is_reward(self):
        model = _constant_q_model([2.0, 3.0])
        np.testing.assert_array_equal(dvqn_targets(model, self._batch(1.0, True), 0.95), [1.0])

    def test_q_loss_on_constant_head(self):
        model = _constant_q_model([2.0, 3.0])
        # Q(z, a=1) = 3 and y = 3.85
        self.assertAlmostEqual(q_loss_dvqn(model, self._batch(1.0, False), 0.95), 0.85**2)

    def test_same_parameter_double_estimator_equals_max(self):
        config = _small_config(feature_dim=4, intermediate_dim=4)
        for seed in range(1000):
            model = build_dvqn_model(3, 3, config, Rng(seed))
            batch = stack_batch(_filled_buffer(3, 3, 4, seed).ordered())
            next_q = q_values(model, encode(model, batch.next_states).mu)
            expected = np.where(batch.dones, batch.rewards, batch.rewards + 0.95 * next_q.max(axis=1))
            np.testing.assert_array_equal(dvqn_targets(model, batch, 0.95), expected)


class DVQNTrainingTestCase(unittest.TestCase):
    def setUp(self):
        self.config = _small_config()
        self.buffer = _filled_buffer(4, 2, 30)

    def test_joint_loss_gradients_match_finite_differences(self):
        for activation in ("elu", "relu"):
            config = _small_config(activation=activation, feature_dim=5, intermediate_dim=5, c1=0.7, c2=1.3)
            model = build_dvqn_model(4, 2, config, Rng(8))
            for tensor in model.parameters().values():
                if tensor.name.endswith(".bias"):
                    tensor.values[:] = Rng(9).split(tensor.name).normal(size=tensor.shape) * 0.1
            batch = stack_batch(self.buffer.ordered()[:6])
            targets = dvqn_targets(model, batch, 0.95)
            eps = Rng(10).normal(size=(6, 2))

            def loss_fn(tape, model=model, batch=batch, targets=targets, eps=eps, config=config):
                return trace_dvqn_loss(model, batch, targets, eps, config.c1, config.c2, tape).total

            self.assertLess(finite_difference_check(loss_fn, model.parameters()), 1e-4, msg=activation)

    def test_targets_are_constants_on_the_tape(self):
        model = build_dvqn_model(4, 2, self.config, Rng(1))
        batch = stack_batch(self.buffer.ordered()[:8])
        trace = trace_dvqn_loss(model, batch, dvqn_targets(model, batch, 0.95), np.zeros((8, 2)), 1.0, 1.0)
        self.assertEqual(trace.targets.parents, ())
        self.assertIsNone(trace.targets.vjp)
        self.assertIsNone(trace.targets.param)
        grads = backward(trace.tape, trace.total)
        self.assertEqual(set(grads), set(model.parameters()))

    def test_train_step_reports_consistent_breakdown_and_updates_every_parameter(self):
        model = build_dvqn_model(4, 2, self.config, Rng(1))
        before = {name: tensor.values.copy() for name, tensor in model.parameters().items()}
        state = OptimizerState("rmsprop", self.config.learning_rate)

        losses = train_step_dvqn(model, self.buffer, state, self.config, Rng(2))

        self.assertAlmostEqual(losses.total, losses.c1 * (losses.recon + losses.kl) + losses.c2 * losses.q, delta=1e-12)
        self.assertGreaterEqual(losses.kl, 0.0)
        for name, tensor in model.parameters().items():
            self.assertFalse(np.array_equal(before[name], tensor.values), msg=name)

    def test_training_is_bit_reproducible(self):
        def run():
            model = build_dvqn_model(4, 2, self.config, Rng(1))
            state = OptimizerState("rmsprop", self.config.learning_rate)
            rng = Rng(3)
            return [train_step_dvqn(model, self.buffer, state, self.config, rng).total for _ in range(5)]

        self.assertEqual(run(), run())


class BaselineTestCase(unittest.TestCase):
    def setUp(self):
        self.config = resolve_agent_config("dqn", {"hidden_dims": [8, 8], "batch_size": 8})

    def test_epsilon_schedule(self):
        self.assertEqual(epsilon_at(0, self.config), 1.0)
        self.assertAlmostEqual(epsilon_at(990, self.config), 0.01)
        self.assertEqual(epsilon_at(5000, self.config), 0.01)

    def test_full_exploration_is_uniform(self):
        agent = build_agent(self.config, 4, 2, Rng(0))
        rng = Rng(1)
        actions = [act_baseline(agent.model, np.zeros(4), 1.0, rng) for _ in range(10_000)]
        self.assertLess(abs(np.mean(actions) - 0.5), 0.05)

    def test_zero_epsilon_is_greedy(self):
        agent = build_agent(self.config, 4, 2, Rng(0))
        rng = Rng(1)
        s = np.array([0.1, 0.2, -0.3, 0.4])
        greedy = agent.greedy_action(s)
        self.assertTrue(all(act_baseline(agent.model, s, 0.0, rng) == greedy for _ in range(20)))

    def test_ddqn_with_target_equal_online_matches_dqn(self):
        agent = build_agent(self.config, 4, 2, Rng(0))
        batch = stack_batch(_filled_buffer(4, 2, 16).ordered())
        np.testing.assert_array_equal(
            ddqn_targets(agent.model, agent.model.copy(), batch, 0.95), dqn_targets(agent.model, batch, 0.95)
        )

    def test_target_sync_after_exact_frame_count(self):
        config = resolve_agent_config("ddqn", {"hidden_dims": [4]})
        agent = build_agent(config, 4, 2, Rng(0))
        for tensor in agent.model.parameters().values():
            tensor.values += 1.0
        for _ in range(31_999):
            agent.on_frame()
        target = agent.target.parameters()
        self.assertFalse(
            all(np.array_equal(t.values, target[n].values) for n, t in agent.model.parameters().items())
        )
        agent.on_frame()
        for name, tensor in agent.model.parameters().items():
            np.testing.assert_array_equal(tensor.values, target[name].values)

    def test_dqn_update_uses_huber_and_changes_weights(self):
        agent = build_agent(self.config, 4, 2, Rng(0))
        before = agent.model.layers[0].weights.values.copy()
        stats = agent.update(_filled_buffer(4, 2, 20), Rng(1))
        self.assertIsNone(stats.recon)
        self.assertEqual(stats.q, stats.total)
        self.assertFalse(np.array_equal(before, agent.model.layers[0].weights.values))

    def test_q_network_rejects_wrong_width(self):
        agent = build_agent(self.config, 4, 2, Rng(0))
        self.assertIsInstance(agent.model, QNetwork)
        with self.assertRaises(StructuralError):
            agent.greedy_action(np.zeros(5))


class AgentConfigTestCase(unittest.TestCase):
    def test_dvqn_rejects_epsilon_schedule(self):
        with self.assertRaises(ConfigError):
            resolve_agent_config("dvqn", {"epsilon_start": 1.0})

    def test_baseline_epsilon_must_be_ordered(self):
        with self.assertRaises(ConfigError):
            resolve_agent_config("dqn", {"epsilon_start": 0.1, "epsilon_end": 0.5})

    def test_invalid_values_are_config_errors(self):
        with self.assertRaises(ConfigError):
            resolve_agent_config("dvqn", {"gamma": 1.5})


class AgentWrapperTestCase(unittest.TestCase):
    def test_observation_scale_is_applied(self):
        agent = build_agent(_small_config(), 2, 2, Rng(0), [2.0, 4.0])
        np.testing.assert_array_equal(agent.preprocess([1.0, 1.0]), [0.5, 0.25])
        with self.assertRaises(StructuralError):
            build_agent(_small_config(), 2, 2, Rng(0), [1.0, 0.0])

    def test_agent_classes(self):
        self.assertIsInstance(build_agent(_small_config(), 2, 2, Rng(0)), DVQNAgent)
        self.assertIsInstance(build_agent(resolve_agent_config("dqn"), 2, 2, Rng(0)), DQNAgent)
        self.assertIsInstance(build_agent(resolve_agent_config("ddqn"), 2, 2, Rng(0)), DDQNAgent)
        self.assertIsNone(build_agent(_small_config(), 2, 2, Rng(0)).epsilon)

    def test_checkpoint_restores_parameters_and_metadata(self):
        agent = build_agent(_small_config(), 4, 2, Rng(0), [2.4, 5.0, 0.21, 5.0])
        with tempfile.TemporaryDirectory() as tmp:
            path = save_checkpoint(Path(tmp) / "agent.dvqn", agent, "cartpole")
            loaded = load_checkpoint(path)

        self.assertEqual(loaded.kind, "dvqn")
        self.assertEqual(loaded.env_id, "cartpole")
        self.assertEqual(len(loaded.config_digest), 16)
        self.assertEqual(loaded.agent.config, agent.config)
        np.testing.assert_array_equal(loaded.agent.observation_scale, agent.observation_scale)
        for name, tensor in agent.parameters().items():
            np.testing.assert_array_equal(loaded.agent.parameters()[name].values, tensor.values)

    def test_ddqn_checkpoint_restores_target(self):
        agent = build_agent(resolve_agent_config("ddqn", {"hidden_dims": [4]}), 4, 2, Rng(0))
        with tempfile.TemporaryDirectory() as tmp:
            loaded = load_checkpoint(save_checkpoint(Path(tmp) / "agent.dvqn", agent, "cartpole"))
        target = loaded.agent.target.parameters()
        for name, tensor in loaded.agent.model.parameters().items():
            np.testing.assert_array_equal(target[name].values, tensor.values)


if __name__ == "__main__":
    unittest.main()
