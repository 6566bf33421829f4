"""Point-mass control tasks with dense and sparse reward modes.

Both tasks are fixed-horizon double integrators: ``x' = x + dt*v``,
``v' = v + dt*a`` with actions clipped to ``[-1, 1]``. Success is judged
from the physical state only (distance to goal within ``tol``).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class EnvProtocolError(RuntimeError):
    """Raised when an environment is stepped after it reported done."""


@dataclass(frozen=True)
class EnvSpec:
    obs_dim: int
    act_dim: int
    horizon: int
    reward_mode: str = "dense"

    def __post_init__(self):
        if self.act_dim < 1:
            raise ValueError("act_dim must be >= 1")
        if self.horizon < 2:
            raise ValueError("horizon must be >= 2")
        if self.reward_mode not in ("dense", "sparse"):
            raise ValueError(f"unknown reward_mode {self.reward_mode!r}")


@dataclass
class EnvState:
    observation: np.ndarray
    step_index: int = 0
    done: bool = False
    success: bool = False


class PointMassEnv:
    """Goal-reaching point mass in ``dim`` dimensions.

    Observation is ``[x, v, goal]`` and, when ``time_feature`` is set, the
    elapsed fraction ``step_index / horizon`` is appended.
    """

    def __init__(
        self,
        dim: int = 2,
        horizon: int = 50,
        dt: float = 0.1,
        reward_mode: str = "dense",
        tol: float = 0.1,
        start_range: float = 1.0,
        goal_range: tuple[float, float] = (0.0, 1.0),
        time_feature: bool = False,
    ):
        self.dim = dim
        self.dt = dt
        self.tol = tol
        self.start_range = start_range
        self.goal_range = goal_range
        self.time_feature = time_feature
        obs_dim = 3 * dim + (1 if time_feature else 0)
        self.spec = EnvSpec(obs_dim=obs_dim, act_dim=dim, horizon=horizon, reward_mode=reward_mode)
        self._x = np.zeros(dim)
        self._v = np.zeros(dim)
        self._goal = np.zeros(dim)
        self._state: EnvState | None = None

    @property
    def horizon(self) -> int:
        return self.spec.horizon

    def _sample_goal(self, rng: np.random.Generator) -> np.ndarray:
        lo, hi = self.goal_range
        # radius in [lo, hi] in a random direction (per axis for 1-D: a random sign)
        direction = rng.normal(size=self.dim)
        direction /= np.linalg.norm(direction)
        radius = rng.uniform(lo, hi)
        return direction * radius

    def reset(self, seed: int) -> EnvState:
        rng = np.random.default_rng(seed)
        self._x = rng.uniform(-self.start_range, self.start_range, size=self.dim)
        self._v = np.zeros(self.dim)
        self._goal = self._x + self._sample_goal(rng)
        self._state = EnvState(observation=self._observe(0), step_index=0)
        return self._state

    def _observe(self, step_index: int) -> np.ndarray:
        parts = [self._x, self._v, self._goal]
        if self.time_feature:
            parts.append(np.array([step_index / self.horizon]))
        return np.concatenate(parts).astype(np.float64)

    def distance(self) -> float:
        return float(np.linalg.norm(self._x - self._goal))

    def step(self, action) -> tuple[EnvState, float, bool, bool]:
        if self._state is None:
            raise EnvProtocolError("step() called before reset()")
        if self._state.done:
            raise EnvProtocolError("step() called on a finished episode; call reset() first")
        a = np.clip(np.asarray(action, dtype=np.float64).reshape(self.dim), -1.0, 1.0)
        self._x = self._x + self.dt * self._v
        self._v = self._v + self.dt * a
        t = self._state.step_index + 1
        dist = self.distance()
        done = t >= self.horizon
        if self.spec.reward_mode == "dense" or done:
            reward = -dist
        else:
            reward = 0.0
        success = dist <= self.tol
        self._state = EnvState(observation=self._observe(t), step_index=t, done=done, success=success)
        return self._state, reward, done, success


ENV_IDS = ("pointmass-2d", "chain-reach")


def make_env(env_id: str, reward_mode: str = "dense") -> PointMassEnv:
    """Build a task by string id."""
    if env_id == "pointmass-2d":
        return PointMassEnv(dim=2, horizon=50, dt=0.1, reward_mode=reward_mode,
                            start_range=0.5, goal_range=(0.0, 0.5))
    if env_id == "chain-reach":
        # 1-D reach to a goal 1-2 units away; the time feature keeps the
        # terminal-only reward Markov in the observation.
        return PointMassEnv(dim=1, horizon=25, dt=0.2, reward_mode=reward_mode,
                            start_range=0.0, goal_range=(1.0, 2.0), time_feature=True)
    raise ValueError(f"unknown env id {env_id!r}; expected one of {ENV_IDS}")
