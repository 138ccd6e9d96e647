"""Deterministic, seedable test-bed environments behind one interface.

CartPole and Acrobot follow the canonical classic-control equations; Crossing and
FourRooms are small gridworlds observed through a 4-channel one-hot encoding.
"""

from __future__ import annotations

import math
from abc import ABC, abstractmethod
from collections import deque
from dataclasses import dataclass, field
from typing import ClassVar

import numpy as np

from agent_routing import normalize_env_id
from errors import StructuralError, UsageError
from nnkit import Rng

# ===== Shared types =====


@dataclass
class StepResult:
    observation: np.ndarray
    reward: float
    done: bool
    steps_elapsed: int


class Environment(ABC):
    """``reset`` then ``step`` until ``done``; ``done`` is sticky until the next reset."""

    env_id: ClassVar[str]
    obs_dim: ClassVar[int]
    action_count: ClassVar[int]
    max_steps: ClassVar[int]

    def __init__(self) -> None:
        self.steps = 0
        self.done = True

    @abstractmethod
    def reset(self, rng: Rng) -> np.ndarray: ...

    @abstractmethod
    def _advance(self, action: int) -> tuple[float, bool]:
        """Apply one action; return (reward, terminal)."""

    @abstractmethod
    def observation(self) -> np.ndarray: ...

    def label(self) -> int | None:
        """Small integer describing the current state, when the env defines one."""
        return None

    def step(self, action: int) -> StepResult:
        if self.done:
            raise UsageError(f"{self.env_id}: step() called after done; call reset() first.")
        action = int(action)
        if not 0 <= action < self.action_count:
            raise StructuralError(
                f"{self.env_id}: action {action} outside [0, {self.action_count})."
            )
        reward, terminal = self._advance(action)
        self.steps += 1
        self.done = terminal or self.steps >= self.max_steps
        return StepResult(self.observation(), float(reward), self.done, self.steps)

    def _begin_episode(self) -> None:
        self.steps = 0
        self.done = False


# ===== CartPole =====

CARTPOLE_GRAVITY = 9.8
CARTPOLE_MASS_CART = 1.0
CARTPOLE_MASS_POLE = 0.1
CARTPOLE_HALF_LENGTH = 0.5
CARTPOLE_FORCE = 10.0
CARTPOLE_TAU = 0.02
CARTPOLE_X_LIMIT = 2.4
CARTPOLE_THETA_LIMIT = 12 * 2 * math.pi / 360
CARTPOLE_CENTER_BAND = 2 * 2 * math.pi / 360

ANGLE_LEFT, ANGLE_CENTER, ANGLE_RIGHT = 0, 1, 2


def cartpole_dynamics(state: np.ndarray, action: int) -> np.ndarray:
    """One explicit Euler step of the cart-pole equations."""

    x, x_dot, theta, theta_dot = (float(v) for v in state)
    force = CARTPOLE_FORCE if action == 1 else -CARTPOLE_FORCE
    total_mass = CARTPOLE_MASS_CART + CARTPOLE_MASS_POLE
    polemass_length = CARTPOLE_MASS_POLE * CARTPOLE_HALF_LENGTH
    cos_t = math.cos(theta)
    sin_t = math.sin(theta)

    temp = (force + polemass_length * theta_dot**2 * sin_t) / total_mass
    theta_acc = (CARTPOLE_GRAVITY * sin_t - cos_t * temp) / (
        CARTPOLE_HALF_LENGTH * (4.0 / 3.0 - CARTPOLE_MASS_POLE * cos_t**2 / total_mass)
    )
    x_acc = temp - polemass_length * theta_acc * cos_t / total_mass

    return np.array(
        [
            x + CARTPOLE_TAU * x_dot,
            x_dot + CARTPOLE_TAU * x_acc,
            theta + CARTPOLE_TAU * theta_dot,
            theta_dot + CARTPOLE_TAU * theta_acc,
        ]
    )


class CartPoleEnv(Environment):
    env_id = "cartpole"
    obs_dim = 4
    action_count = 2
    max_steps = 200

    def __init__(self) -> None:
        super().__init__()
        self.state = np.zeros(4)

    def reset(self, rng: Rng) -> np.ndarray:
        self.state = np.asarray(rng.uniform(-0.05, 0.05, size=4), dtype=float)
        self._begin_episode()
        return self.observation()

    def _advance(self, action: int) -> tuple[float, bool]:
        self.state = cartpole_dynamics(self.state, action)
        x, _, theta, _ = self.state
        failed = abs(x) > CARTPOLE_X_LIMIT or abs(theta) > CARTPOLE_THETA_LIMIT
        return (-1.0, True) if failed else (1.0, False)

    def observation(self) -> np.ndarray:
        return self.state.copy()

    def label(self) -> int:
        theta = float(self.state[2])
        if abs(theta) < CARTPOLE_CENTER_BAND:
            return ANGLE_CENTER
        return ANGLE_LEFT if theta < 0 else ANGLE_RIGHT


# ===== Acrobot =====

ACROBOT_DT = 0.2
ACROBOT_LINK_LENGTH_1 = 1.0
ACROBOT_LINK_MASS_1 = 1.0
ACROBOT_LINK_MASS_2 = 1.0
ACROBOT_LINK_COM_1 = 0.5
ACROBOT_LINK_COM_2 = 0.5
ACROBOT_LINK_MOI = 1.0
ACROBOT_GRAVITY = 9.8
ACROBOT_MAX_VEL_1 = 4 * math.pi
ACROBOT_MAX_VEL_2 = 9 * math.pi
ACROBOT_TORQUES = (-1.0, 0.0, 1.0)


def wrap_angle(x: float, low: float = -math.pi, high: float = math.pi) -> float:
    span = high - low
    while x > high:
        x -= span
    while x < low:
        x += span
    return x


def acrobot_derivatives(state: np.ndarray, torque: float) -> np.ndarray:
    m1, m2 = ACROBOT_LINK_MASS_1, ACROBOT_LINK_MASS_2
    l1 = ACROBOT_LINK_LENGTH_1
    lc1, lc2 = ACROBOT_LINK_COM_1, ACROBOT_LINK_COM_2
    i1 = i2 = ACROBOT_LINK_MOI
    g = ACROBOT_GRAVITY
    theta1, theta2, dtheta1, dtheta2 = (float(v) for v in state)

    d1 = m1 * lc1**2 + m2 * (l1**2 + lc2**2 + 2 * l1 * lc2 * math.cos(theta2)) + i1 + i2
    d2 = m2 * (lc2**2 + l1 * lc2 * math.cos(theta2)) + i2
    phi2 = m2 * lc2 * g * math.cos(theta1 + theta2 - math.pi / 2.0)
    phi1 = (
        -m2 * l1 * lc2 * dtheta2**2 * math.sin(theta2)
        - 2 * m2 * l1 * lc2 * dtheta2 * dtheta1 * math.sin(theta2)
        + (m1 * lc1 + m2 * l1) * g * math.cos(theta1 - math.pi / 2)
        + phi2
    )
    ddtheta2 = (
        torque + d2 / d1 * phi1 - m2 * l1 * lc2 * dtheta1**2 * math.sin(theta2) - phi2
    ) / (m2 * lc2**2 + i2 - d2**2 / d1)
    ddtheta1 = -(d2 * ddtheta2 + phi1) / d1
    return np.array([dtheta1, dtheta2, ddtheta1, ddtheta2])


def acrobot_dynamics(state: np.ndarray, action: int) -> np.ndarray:
    """One RK4 step of length ``ACROBOT_DT``, then angle wrapping and velocity clamps."""

    torque = ACROBOT_TORQUES[action]
    y0 = np.asarray(state, dtype=float)
    dt = ACROBOT_DT
    k1 = acrobot_derivatives(y0, torque)
    k2 = acrobot_derivatives(y0 + dt / 2.0 * k1, torque)
    k3 = acrobot_derivatives(y0 + dt / 2.0 * k2, torque)
    k4 = acrobot_derivatives(y0 + dt * k3, torque)
    y1 = y0 + dt / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)
    return np.array(
        [
            wrap_angle(y1[0]),
            wrap_angle(y1[1]),
            min(max(y1[2], -ACROBOT_MAX_VEL_1), ACROBOT_MAX_VEL_1),
            min(max(y1[3], -ACROBOT_MAX_VEL_2), ACROBOT_MAX_VEL_2),
        ]
    )


class AcrobotEnv(Environment):
    env_id = "acrobot"
    obs_dim = 6
    action_count = 3
    max_steps = 500

    def __init__(self) -> None:
        super().__init__()
        self.state = np.zeros(4)

    def reset(self, rng: Rng) -> np.ndarray:
        self.state = np.asarray(rng.uniform(-0.1, 0.1, size=4), dtype=float)
        self._begin_episode()
        return self.observation()

    def reached_ceiling(self) -> bool:
        theta1, theta2 = self.state[0], self.state[1]
        return bool(-math.cos(theta1) - math.cos(theta2 + theta1) > 1.0)

    def _advance(self, action: int) -> tuple[float, bool]:
        self.state = acrobot_dynamics(self.state, action)
        terminal = self.reached_ceiling()
        return (0.0 if terminal else -1.0), terminal

    def observation(self) -> np.ndarray:
        theta1, theta2, dtheta1, dtheta2 = self.state
        return np.array(
            [math.cos(theta1), math.sin(theta1), math.cos(theta2), math.sin(theta2), dtheta1, dtheta2]
        )


# ===== Gridworlds =====

GRID_STEP_REWARD = -0.01
GRID_DOOR_REWARD = 0.1
GRID_GOAL_REWARD = 1.0

# (dx, dy) for N, S, E, W; y grows downward.
GRID_MOVES = ((0, -1), (0, 1), (1, 0), (-1, 0))

Cell = tuple[int, int]


def flood_fill(walls: np.ndarray, start: Cell) -> dict[Cell, int]:
    """BFS distances from ``start`` over non-wall cells."""

    height, width = walls.shape
    distances = {start: 0}
    queue = deque([start])
    while queue:
        x, y = queue.popleft()
        for dx, dy in GRID_MOVES:
            nx, ny = x + dx, y + dy
            if 0 <= nx < width and 0 <= ny < height and not walls[ny, nx] and (nx, ny) not in distances:
                distances[(nx, ny)] = distances[(x, y)] + 1
                queue.append((nx, ny))
    return distances


def bordered_grid(width: int, height: int) -> np.ndarray:
    walls = np.zeros((height, width), dtype=bool)
    walls[0, :] = walls[-1, :] = True
    walls[:, 0] = walls[:, -1] = True
    return walls


@dataclass
class GridWorld:
    width: int
    height: int
    walls: np.ndarray
    goal: Cell
    start: Cell
    doors: frozenset[Cell] = frozenset()
    agent: Cell = (1, 1)
    visited_doors: set[Cell] = field(default_factory=set)

    def is_wall(self, cell: Cell) -> bool:
        x, y = cell
        return bool(self.walls[y, x])


def grid_observation(grid: GridWorld) -> np.ndarray:
    """Channels wall, agent, goal, door over the grid, each flattened row-major."""

    channels = np.zeros((4, grid.height, grid.width))
    channels[0] = grid.walls
    channels[1, grid.agent[1], grid.agent[0]] = 1.0
    channels[2, grid.goal[1], grid.goal[0]] = 1.0
    for x, y in grid.doors:
        channels[3, y, x] = 1.0
    return channels.reshape(-1)


class GridWorldEnv(Environment):
    action_count = 4
    max_steps = 400
    width: ClassVar[int]
    height: ClassVar[int]

    def __init__(self, *, fixed_layout: bool = True) -> None:
        super().__init__()
        # fixed_layout: draw the map on the first reset and keep it for the
        # instance's lifetime; otherwise redraw on every reset.
        self.fixed_layout = fixed_layout
        self._layout_drawn = False
        self.grid = self._build_layout(None)

    @abstractmethod
    def _build_layout(self, rng: Rng | None) -> GridWorld: ...

    def reset(self, rng: Rng) -> np.ndarray:
        if not (self.fixed_layout and self._layout_drawn):
            self.grid = self._build_layout(rng)
            self._layout_drawn = True
        self.grid.agent = self.grid.start
        self.grid.visited_doors = set()
        self._begin_episode()
        return self.observation()

    def restore_layout(self, walls: np.ndarray) -> None:
        """Pin a saved wall grid; later resets keep it when ``fixed_layout`` is set."""

        walls = np.asarray(walls).astype(bool)
        if walls.shape != (self.height, self.width):
            raise StructuralError(
                f"{self.env_id}: saved layout has shape {walls.shape}, expected {(self.height, self.width)}."
            )
        grid = self._build_layout(None)
        if walls[grid.start[1], grid.start[0]] or grid.goal not in flood_fill(walls, grid.start):
            raise StructuralError(f"{self.env_id}: saved layout has no path from start to goal.")
        grid.walls = walls.copy()
        self.grid = grid
        self._layout_drawn = True

    def _advance(self, action: int) -> tuple[float, bool]:
        dx, dy = GRID_MOVES[action]
        x, y = self.grid.agent
        target = (x + dx, y + dy)
        if not self.grid.is_wall(target):
            self.grid.agent = target
        if self.grid.agent == self.grid.goal:
            return GRID_GOAL_REWARD, True
        reward = GRID_STEP_REWARD
        if self.grid.agent in self.grid.doors and self.grid.agent not in self.grid.visited_doors:
            self.grid.visited_doors.add(self.grid.agent)
            reward += GRID_DOOR_REWARD
        return reward, False

    def observation(self) -> np.ndarray:
        return grid_observation(self.grid)

    def shortest_path_length(self) -> int:
        distances = flood_fill(self.grid.walls, self.grid.start)
        if self.grid.goal not in distances:
            raise UsageError(f"{self.env_id}: goal unreachable in current layout.")
        return distances[self.grid.goal]


CROSSING_SIZE = 9
CROSSING_LINES = 3
CROSSING_MAX_ATTEMPTS = 1000


class CrossingEnv(GridWorldEnv):
    """9x9 room crossed by three interior wall lines, each with a single gap."""

    env_id = "crossing"
    width = height = CROSSING_SIZE
    obs_dim = 4 * CROSSING_SIZE * CROSSING_SIZE

    def _build_layout(self, rng: Rng | None) -> GridWorld:
        start, goal = (1, 1), (CROSSING_SIZE - 2, CROSSING_SIZE - 2)
        if rng is None:
            return GridWorld(self.width, self.height, bordered_grid(self.width, self.height), goal, start)

        # Even interior indices never touch the start or goal cell.
        candidates = [
            (orientation, index)
            for orientation in ("horizontal", "vertical")
            for index in range(2, CROSSING_SIZE - 1, 2)
        ]
        for _ in range(CROSSING_MAX_ATTEMPTS):
            walls = bordered_grid(self.width, self.height)
            picks = rng.sample_without_replacement(len(candidates), CROSSING_LINES)
            for pick in picks:
                orientation, index = candidates[int(pick)]
                gap = int(rng.integers(1, CROSSING_SIZE - 1))
                if orientation == "horizontal":
                    walls[index, 1:-1] = True
                    walls[index, gap] = False
                else:
                    walls[1:-1, index] = True
                    walls[gap, index] = False
            if goal in flood_fill(walls, start):
                return GridWorld(self.width, self.height, walls, goal, start)
        raise UsageError("crossing: no solvable layout found within the attempt budget.")

    def label(self) -> int:
        x, y = self.grid.agent
        half = CROSSING_SIZE // 2
        return int(y >= half) * 2 + int(x >= half)


FOURROOMS_SIZE = 13
FOURROOMS_WALL = 6
FOURROOMS_DOORS: frozenset[Cell] = frozenset({(6, 3), (6, 9), (3, 6), (9, 6)})
FOURROOMS_DOORWAY_LABEL = 4


class FourRoomsEnv(GridWorldEnv):
    """Fixed 13x13 four-rooms map with one doorway per wall segment."""

    env_id = "fourrooms"
    width = height = FOURROOMS_SIZE
    obs_dim = 4 * FOURROOMS_SIZE * FOURROOMS_SIZE

    def _build_layout(self, rng: Rng | None) -> GridWorld:
        walls = bordered_grid(self.width, self.height)
        walls[:, FOURROOMS_WALL] = True
        walls[FOURROOMS_WALL, :] = True
        for x, y in FOURROOMS_DOORS:
            walls[y, x] = False
        return GridWorld(
            self.width,
            self.height,
            walls,
            goal=(FOURROOMS_SIZE - 2, FOURROOMS_SIZE - 2),
            start=(1, 1),
            doors=FOURROOMS_DOORS,
        )

    def label(self) -> int:
        """Room index 0..3 (row-major), or the doorway label."""

        x, y = self.grid.agent
        if self.grid.agent in FOURROOMS_DOORS:
            return FOURROOMS_DOORWAY_LABEL
        return int(y > FOURROOMS_WALL) * 2 + int(x > FOURROOMS_WALL)


ENVIRONMENTS: dict[str, type[Environment]] = {
    CartPoleEnv.env_id: CartPoleEnv,
    AcrobotEnv.env_id: AcrobotEnv,
    CrossingEnv.env_id: CrossingEnv,
    FourRoomsEnv.env_id: FourRoomsEnv,
}


def make_env(env_id: str) -> Environment:
    return ENVIRONMENTS[normalize_env_id(env_id)]()


def checkpoint_env(env: Environment | str | None, env_id: str, layout: np.ndarray | None = None) -> Environment:
    """Env for rolling out a checkpoint trained on ``env_id``, pinned to its saved gridworld layout."""

    environment = env if isinstance(env, Environment) else make_env(env or env_id)
    if layout is not None and isinstance(environment, GridWorldEnv) and environment.env_id == normalize_env_id(env_id):
        environment.restore_layout(layout)
    return environment
