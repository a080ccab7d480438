"""Small environments with multimodal reward landscapes.

* ``bandit1d`` / ``banditNd``: one-step bandit on [-1, 1]^m with two equal peaks
  at -0.25 and 0.75 per dimension.
* ``pointmass2g``: 2-D point mass that should settle at one of two goals.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

BANDIT_PEAKS = (-0.25, 0.75)
POINTMASS_GOALS = np.array([[-0.5, 0.5], [0.5, 0.5]])


@dataclass(frozen=True)
class EnvSpec:
    obs_dim: int
    act_dim: int
    horizon: int
    reward_range: tuple[float, float]


@dataclass
class StepResult:
    obs: np.ndarray
    reward: float
    done: bool
    info: dict = field(default_factory=dict)


def bandit_reward(a):
    """``1 / (1 + 10 d)`` with ``d`` the distance to the nearer peak."""
    a = np.asarray(a, dtype=np.float64)
    d = np.minimum(np.abs(a - BANDIT_PEAKS[0]), np.abs(a - BANDIT_PEAKS[1]))
    return 1.0 / (1.0 + 10.0 * d)


class Bandit:
    """One-step bandit; the observation is always the scalar 0."""

    def __init__(self, dims: int = 1, seed: int | None = None):
        if dims < 1:
            raise ValueError("dims must be >= 1")
        self.dims = dims
        self.spec = EnvSpec(obs_dim=1, act_dim=dims, horizon=1, reward_range=(1.0 / 8.5, 1.0))
        self._obs = np.zeros(1)

    def reset(self) -> np.ndarray:
        return self._obs.copy()

    def step(self, action) -> StepResult:
        a = np.asarray(action, dtype=np.float64).reshape(self.dims)
        per_dim = bandit_reward(a)
        d = np.abs(a[:, None] - np.array(BANDIT_PEAKS)[None, :])
        return StepResult(self._obs.copy(), float(per_dim.mean()), True,
                          {"nearest_peak": np.argmin(d, axis=1)})


def pointmass_step(state, action, dt=0.05, v_max=2.0):
    """Semi-implicit Euler. ``state`` is ``(px, py, vx, vy)``, ``action`` an acceleration in [-1, 1]^2.

    Returns ``(next_state, reward, nearest_goal, distance_to_it)``.
    """
    state = np.asarray(state, dtype=np.float64)
    a = np.clip(np.asarray(action, dtype=np.float64), -1.0, 1.0)
    vel = np.clip(state[2:] + dt * a, -v_max, v_max)
    pos = state[:2] + dt * vel
    dists = np.linalg.norm(POINTMASS_GOALS - pos, axis=1)
    goal = int(np.argmin(dists))
    reward = float(np.exp(-4.0 * dists[goal]) - 0.01 * np.dot(a, a))
    return np.concatenate([pos, vel]), reward, goal, float(dists[goal])


class PointMass:
    """Two-goal point mass. Starts at rest at the origin, equidistant from both goals.

    ``reset_noise`` adds a seeded uniform perturbation of the start position.
    """

    def __init__(self, horizon: int = 100, dt: float = 0.05, reset_noise: float = 0.0, seed: int | None = None):
        self.spec = EnvSpec(obs_dim=4, act_dim=2, horizon=horizon, reward_range=(-0.02, 1.0))
        self.dt = dt
        self.reset_noise = reset_noise
        self._rng = np.random.default_rng(seed)
        self.state = np.zeros(4)
        self.t = 0

    def reset(self) -> np.ndarray:
        self.state = np.zeros(4)
        if self.reset_noise > 0:
            self.state[:2] = self._rng.uniform(-self.reset_noise, self.reset_noise, size=2)
        self.t = 0
        return self.state.copy()

    def step(self, action) -> StepResult:
        if self.t >= self.spec.horizon:
            raise RuntimeError("step() called on a finished episode; call reset()")
        self.state, reward, goal, dist = pointmass_step(self.state, action, self.dt)
        self.t += 1
        info = {"nearest_goal": goal, "goal_distance": dist}
        return StepResult(self.state.copy(), reward, self.t >= self.spec.horizon, info)


ENV_NAMES = ("bandit1d", "banditNd", "pointmass2g")


def make_env(name: str, seed: int | None = None, **params):
    if name == "bandit1d":
        return Bandit(1, seed=seed)
    if name == "banditNd":
        return Bandit(params.get("dims", 2), seed=seed)
    if name == "pointmass2g":
        return PointMass(
            horizon=params.get("horizon", 100),
            reset_noise=params.get("reset_noise", 0.0),
            seed=seed,
        )
    raise ValueError(f"unknown environment {name!r}; expected one of {ENV_NAMES}")
