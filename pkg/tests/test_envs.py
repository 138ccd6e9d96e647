import math
import unittest
import unittest.mock

import numpy as np

from envs import (
    ACROBOT_MAX_VEL_1,
    ACROBOT_MAX_VEL_2,
    FOURROOMS_DOORWAY_LABEL,
    GRID_DOOR_REWARD,
    GRID_MOVES,
    GRID_STEP_REWARD,
    AcrobotEnv,
    CartPoleEnv,
    CrossingEnv,
    FourRoomsEnv,
    acrobot_dynamics,
    cartpole_dynamics,
    checkpoint_env,
    flood_fill,
    make_env,
)
from errors import ConfigError, StructuralError, UsageError
from nnkit import Rng


def oracle_cartpole(state, action):
    """Cart-pole Euler step written from the mass-matrix form."""

    x, v, th, om = state
    mc, mp, half, g, tau = 1.0, 0.1, 0.5, 9.8, 0.02
    f = 10.0 if action == 1 else -10.0
    c, s = math.cos(th), math.sin(th)
    # (mc + mp) a + mp l c alpha = f + mp l om^2 s
    # c a + (4/3) l alpha = g s
    mass = np.array([[mc + mp, mp * half * c], [c, 4.0 / 3.0 * half]])
    rhs = np.array([f + mp * half * om * om * s, g * s])
    a, alpha = np.linalg.solve(mass, rhs)
    return np.array([x + tau * v, v + tau * a, th + tau * om, om + tau * alpha])


def oracle_acrobot_rhs(y, torque):
    t1, t2, w1, w2 = y
    m1 = m2 = l1 = 1.0
    lc1 = lc2 = 0.5
    i1 = i2 = 1.0
    g = 9.8
    c2 = math.cos(t2)
    mass = np.array(
        [
            [m1 * lc1**2 + m2 * (l1**2 + lc2**2 + 2 * l1 * lc2 * c2) + i1 + i2, m2 * (lc2**2 + l1 * lc2 * c2) + i2],
            [m2 * (lc2**2 + l1 * lc2 * c2) + i2, m2 * lc2**2 + i2],
        ]
    )
    grav2 = m2 * lc2 * g * math.sin(t1 + t2)
    grav1 = (m1 * lc1 + m2 * l1) * g * math.sin(t1) + grav2
    coriolis1 = -m2 * l1 * lc2 * math.sin(t2) * (w2 * w2 + 2 * w1 * w2)
    coriolis2 = m2 * l1 * lc2 * math.sin(t2) * w1 * w1
    acc = np.linalg.solve(mass, [-(coriolis1 + grav1), torque - coriolis2 - grav2])
    return np.array([w1, w2, acc[0], acc[1]])


def oracle_acrobot(state, action):
    torque = (-1.0, 0.0, 1.0)[action]
    y = np.asarray(state, dtype=float)
    h = 0.2
    k1 = oracle_acrobot_rhs(y, torque)
    k2 = oracle_acrobot_rhs(y + h * k1 / 2, torque)
    k3 = oracle_acrobot_rhs(y + h * k2 / 2, torque)
    k4 = oracle_acrobot_rhs(y + h * k3, torque)
    out = y + h * (k1 + 2 * k2 + 2 * k3 + k4) / 6
    out[2] = np.clip(out[2], -4 * math.pi, 4 * math.pi)
    out[3] = np.clip(out[3], -9 * math.pi, 9 * math.pi)
    return out


def angle_gap(a, b):
    return abs((a - b + math.pi) % (2 * math.pi) - math.pi)


def path_actions(env):
    """Greedy descent along BFS distances to the goal."""

    distances = flood_fill(env.grid.walls, env.grid.goal)
    actions, cell = [], env.grid.start
    while cell != env.grid.goal:
        for action, (dx, dy) in enumerate(GRID_MOVES):
            nxt = (cell[0] + dx, cell[1] + dy)
            if distances.get(nxt, math.inf) == distances[cell] - 1:
                actions.append(action)
                cell = nxt
                break
    return actions


class CartPoleTestCase(unittest.TestCase):
    def test_single_steps_match_oracle(self):
        rng = Rng(0)
        for _ in range(1000):
            state = rng.uniform(-1.0, 1.0, size=4) * np.array([2.4, 3.0, 0.25, 3.0])
            action = int(rng.integers(0, 2))
            np.testing.assert_allclose(cartpole_dynamics(state, action), oracle_cartpole(state, action), rtol=0, atol=1e-10)

    def test_reset_and_rewards(self):
        env = CartPoleEnv()
        observation = env.reset(Rng(1))
        self.assertEqual(observation.shape, (4,))
        self.assertTrue(np.all(np.abs(observation) <= 0.05))

        total, result = 0.0, None
        while not env.done:
            result = env.step(1)
            total += result.reward
        self.assertTrue(result.done)
        self.assertEqual(result.reward, -1.0)
        self.assertEqual(total, result.steps_elapsed - 2)

    def test_time_limit_ends_episode(self):
        env = CartPoleEnv()
        env.reset(Rng(0))
        with unittest.mock.patch("envs.CARTPOLE_THETA_LIMIT", math.inf), unittest.mock.patch(
            "envs.CARTPOLE_X_LIMIT", math.inf
        ):
            results = [env.step(i % 2) for i in range(CartPoleEnv.max_steps)]
        self.assertTrue(results[-1].done)
        self.assertFalse(any(result.done for result in results[:-1]))
        self.assertEqual(results[-1].reward, 1.0)
        self.assertEqual(results[-1].steps_elapsed, 200)

    def test_step_after_done_and_bad_action(self):
        env = CartPoleEnv()
        with self.assertRaises(UsageError):
            env.step(0)
        env.reset(Rng(0))
        with self.assertRaises(StructuralError):
            env.step(2)

    def test_angle_labels(self):
        env = CartPoleEnv()
        env.reset(Rng(0))
        for theta, label in ((-0.1, 0), (0.0, 1), (0.1, 2)):
            env.state = np.array([0.0, 0.0, theta, 0.0])
            self.assertEqual(env.label(), label)

    def test_reset_is_seed_deterministic(self):
        np.testing.assert_array_equal(CartPoleEnv().reset(Rng(7)), CartPoleEnv().reset(Rng(7)))


class AcrobotTestCase(unittest.TestCase):
    def test_single_steps_match_oracle(self):
        rng = Rng(0)
        for _ in range(1000):
            state = np.array(
                [
                    rng.uniform(-math.pi, math.pi),
                    rng.uniform(-math.pi, math.pi),
                    rng.uniform(-ACROBOT_MAX_VEL_1, ACROBOT_MAX_VEL_1),
                    rng.uniform(-ACROBOT_MAX_VEL_2, ACROBOT_MAX_VEL_2),
                ]
            )
            action = int(rng.integers(0, 3))
            got, expected = acrobot_dynamics(state, action), oracle_acrobot(state, action)
            self.assertLess(angle_gap(got[0], expected[0]), 1e-10)
            self.assertLess(angle_gap(got[1], expected[1]), 1e-10)
            self.assertLess(abs(got[2] - expected[2]), 1e-10)
            self.assertLess(abs(got[3] - expected[3]), 1e-10)
            self.assertTrue(-math.pi <= got[0] <= math.pi)

    def test_observation_and_rewards(self):
        env = AcrobotEnv()
        observation = env.reset(Rng(3))
        self.assertEqual(observation.shape, (6,))
        self.assertAlmostEqual(observation[0] ** 2 + observation[1] ** 2, 1.0)
        result = env.step(1)
        self.assertEqual(result.reward, -1.0)

    def test_ceiling_is_terminal_with_zero_reward(self):
        env = AcrobotEnv()
        env.reset(Rng(0))
        env.state = np.array([math.pi, 0.0, 0.0, 0.0])
        self.assertTrue(env.reached_ceiling())
        result = env.step(1)
        self.assertTrue(result.done)
        self.assertEqual(result.reward, 0.0)


class GridWorldTestCase(unittest.TestCase):
    def test_random_walks_never_enter_walls_or_overrun(self):
        rng = Rng(0)
        for env in (CrossingEnv(), FourRoomsEnv(), CrossingEnv(fixed_layout=False)):
            env.reset(rng)
            for _ in range(100_000 // 3):
                if env.done:
                    env.reset(rng)
                result = env.step(int(rng.integers(0, 4)))
                self.assertFalse(env.grid.is_wall(env.grid.agent))
                self.assertLessEqual(result.steps_elapsed, env.max_steps)

    def test_observation_is_one_hot_channels(self):
        env = FourRoomsEnv()
        observation = env.reset(Rng(0)).reshape(4, 13, 13)
        self.assertEqual(observation[1].sum(), 1.0)
        self.assertEqual(observation[1, 1, 1], 1.0)
        self.assertEqual(observation[2, 11, 11], 1.0)
        self.assertEqual(observation[3].sum(), 4.0)

    def test_crossing_layout_is_solvable_and_goal_pays_exactly_one(self):
        for seed in range(20):
            env = CrossingEnv()
            env.reset(Rng(seed))
            actions = path_actions(env)
            self.assertEqual(len(actions), env.shortest_path_length())
            rewards = [env.step(action).reward for action in actions]
            self.assertTrue(env.done)
            self.assertEqual(rewards[-1], 1.0)
            self.assertTrue(all(r == GRID_STEP_REWARD for r in rewards[:-1]))

    def test_crossing_keeps_layout_across_resets(self):
        env = CrossingEnv()
        rng = Rng(4)
        env.reset(rng)
        walls = env.grid.walls.copy()
        env.reset(rng)
        np.testing.assert_array_equal(walls, env.grid.walls)

    def test_restored_layout_survives_reset(self):
        trained = CrossingEnv()
        trained.reset(Rng(4))
        env = checkpoint_env(None, "crossing", trained.grid.walls)
        env.reset(Rng(99))
        np.testing.assert_array_equal(env.grid.walls, trained.grid.walls)
        self.assertEqual(env.grid.agent, (1, 1))

    def test_restore_rejects_bad_layouts(self):
        env = CrossingEnv()
        with self.assertRaises(StructuralError):
            env.restore_layout(np.zeros((13, 13), dtype=bool))
        blocked = env.grid.walls.copy()
        blocked[4, :] = True
        with self.assertRaises(StructuralError):
            env.restore_layout(blocked)

    def test_checkpoint_env_ignores_layout_for_other_envs(self):
        walls = np.ones((9, 9), dtype=bool)
        self.assertIsInstance(checkpoint_env("cartpole", "crossing", walls), CartPoleEnv)
        self.assertIsInstance(checkpoint_env(None, "cartpole", None), CartPoleEnv)

    def test_crossing_quadrant_labels(self):
        env = CrossingEnv()
        env.reset(Rng(0))
        self.assertEqual(env.label(), 0)
        env.grid.agent = (7, 7)
        self.assertEqual(env.label(), 3)

    def test_fourrooms_door_reward_is_paid_once(self):
        env = FourRoomsEnv()
        env.reset(Rng(0))
        east, south, north = 2, 1, 0
        rewards = [env.step(a).reward for a in (east, east, south, south, south, south)]
        self.assertEqual(env.grid.agent, (3, 5))
        self.assertEqual(rewards, [GRID_STEP_REWARD] * 6)
        self.assertAlmostEqual(env.step(south).reward, GRID_STEP_REWARD + GRID_DOOR_REWARD)
        self.assertEqual(env.label(), FOURROOMS_DOORWAY_LABEL)
        env.step(south)
        self.assertEqual(env.label(), 2)
        self.assertEqual(env.step(north).reward, GRID_STEP_REWARD)

    def test_fourrooms_shortest_path(self):
        env = FourRoomsEnv()
        env.reset(Rng(0))
        actions = path_actions(env)
        self.assertEqual(len(actions), env.shortest_path_length())
        for action in actions:
            result = env.step(action)
        self.assertEqual(result.reward, 1.0)

    def test_bumping_a_wall_keeps_position(self):
        env = FourRoomsEnv()
        env.reset(Rng(0))
        env.step(3)
        self.assertEqual(env.grid.agent, (1, 1))


class MakeEnvTestCase(unittest.TestCase):
    def test_reference_ids_resolve(self):
        self.assertIsInstance(make_env("CartPole-v0"), CartPoleEnv)
        self.assertIsInstance(make_env("acrobot"), AcrobotEnv)
        self.assertIsInstance(make_env("CrossingS9N3-v0"), CrossingEnv)
        self.assertIsInstance(make_env("FourRooms-v0"), FourRoomsEnv)

    def test_unknown_env_is_config_error(self):
        with self.assertRaises(ConfigError):
            make_env("pong")


if __name__ == "__main__":
    unittest.main()
