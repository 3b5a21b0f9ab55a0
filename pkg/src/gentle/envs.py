"""Task families: parameterized deterministic MDPs with exact oracle models.

Two desk-scale families are provided:

* ``point_robot`` -- 2-D navigation to a hidden goal drawn uniformly from
  [-1, 1]^2. Dynamics are shared across tasks (position integrator); only
  the reward (negative distance to goal) varies.
* ``point_mass_params`` -- a 2-D point mass pushed along +x, rewarded by
  forward velocity. Each task rescales the damping and mass by 1.5^mu
  with mu ~ U[-3, 3], so dynamics and reward both vary.

Both families are fully deterministic: stepping the same (task, state,
action) twice gives bit-identical results, and `true_model` exposes the
exact transition/reward map used for oracle relabeling.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Mapping

import numpy as np

from .errors import ConfigError
from .rng import Rng

POINT_ROBOT = "point_robot"
POINT_MASS = "point_mass_params"
FAMILIES = (POINT_ROBOT, POINT_MASS)

STATE_BOX = 10.0  # positions (and point-mass velocities) clipped to +- this

REWARD_ONLY = "reward_only"
DYNAMICS_AND_REWARD = "dynamics_and_reward"

_MULT_RANGE = (1.5 ** -3, 1.5 ** 3)


@dataclass(frozen=True)
class EnvConfig:
    family: str
    state_dim: int
    action_dim: int
    horizon: int
    action_bound: float
    dt: float
    reward_mode: str

    @property
    def label_dim(self) -> int:
        """Dimension of the probing label: (s', r) or just (r)."""
        return 1 if self.reward_mode == REWARD_ONLY else self.state_dim + 1


_CONFIGS = {
    POINT_ROBOT: EnvConfig(POINT_ROBOT, state_dim=2, action_dim=2, horizon=20,
                           action_bound=0.1, dt=1.0, reward_mode=REWARD_ONLY),
    POINT_MASS: EnvConfig(POINT_MASS, state_dim=4, action_dim=2, horizon=50,
                          action_bound=1.0, dt=0.1, reward_mode=DYNAMICS_AND_REWARD),
}


def get_config(family: str) -> EnvConfig:
    try:
        return _CONFIGS[family]
    except KeyError:
        raise ConfigError(f"unknown task family {family!r}") from None


@dataclass(frozen=True)
class TaskSpec:
    """Hidden parameters of one task (never exposed to the encoder)."""

    family: str
    params: Mapping[str, float]

    def __post_init__(self):
        get_config(self.family)
        if self.family == POINT_ROBOT:
            goal = np.asarray(self.params["goal"], dtype=np.float64)
            if goal.shape != (2,) or np.any(np.abs(goal) > 1.0):
                raise ConfigError(f"point_robot goal must lie in [-1,1]^2, got {goal}")
        else:
            for key in ("damping_mult", "mass_mult"):
                m = float(self.params[key])
                if not (_MULT_RANGE[0] - 1e-12 <= m <= _MULT_RANGE[1] + 1e-12):
                    raise ConfigError(f"{key}={m} outside [{_MULT_RANGE[0]:.4f}, {_MULT_RANGE[1]:.4f}]")

    @property
    def goal(self) -> np.ndarray:
        return np.asarray(self.params["goal"], dtype=np.float64)

    def to_json(self) -> dict:
        params = {k: (list(v) if isinstance(v, (list, tuple, np.ndarray)) else float(v))
                  for k, v in self.params.items()}
        return {"family": self.family, "params": params}

    @classmethod
    def from_json(cls, obj: dict) -> "TaskSpec":
        params = {k: (tuple(v) if isinstance(v, list) else float(v))
                  for k, v in obj["params"].items()}
        return cls(obj["family"], params)

    def dumps(self) -> str:
        return json.dumps(self.to_json(), sort_keys=True)


def sample_tasks(family: str, count: int, seed: int, split: str = "train") -> list[TaskSpec]:
    """I.i.d. task draws; train/test splits use disjoint substreams of `seed`."""
    if count < 1:
        raise ConfigError(f"count must be >= 1, got {count}")
    if split not in ("train", "test"):
        raise ConfigError(f"split must be 'train' or 'test', got {split!r}")
    rng = Rng(seed).split("tasks", family, split)
    specs = []
    for _ in range(count):
        if family == POINT_ROBOT:
            goal = rng.uniform(-1.0, 1.0, 2)
            specs.append(TaskSpec(POINT_ROBOT, {"goal": tuple(goal)}))
        elif family == POINT_MASS:
            mu = rng.uniform(-3.0, 3.0, 2)
            specs.append(TaskSpec(POINT_MASS, {
                "damping_mult": float(1.5 ** mu[0]),
                "mass_mult": float(1.5 ** mu[1]),
            }))
        else:
            raise ConfigError(f"unknown task family {family!r}")
    return specs


def initial_state(spec: TaskSpec, rng: Rng) -> np.ndarray:
    """Point robot starts anywhere in the task box; the point mass at rest."""
    if spec.family == POINT_ROBOT:
        return rng.uniform(-1.0, 1.0, 2)
    return np.zeros(4)


def env_step(spec: TaskSpec, s: np.ndarray, a: np.ndarray) -> tuple[np.ndarray, float]:
    """One deterministic transition; the action is clipped to the bound first."""
    cfg = get_config(spec.family)
    s = np.asarray(s, dtype=np.float64)
    a = np.asarray(a, dtype=np.float64)
    if s.shape != (cfg.state_dim,) or a.shape != (cfg.action_dim,):
        raise ConfigError(f"state/action shape mismatch for {spec.family}: {s.shape}, {a.shape}")
    if not (np.all(np.isfinite(s)) and np.all(np.isfinite(a))):
        raise ConfigError("env_step requires finite state and action")
    a = np.clip(a, -cfg.action_bound, cfg.action_bound)

    if spec.family == POINT_ROBOT:
        s_next = np.clip(s + a * cfg.dt, -STATE_BOX, STATE_BOX)
        r = -float(np.linalg.norm(s_next - spec.goal))
        return s_next, r

    pos, vel = s[:2], s[2:]
    damping = 0.9 ** float(spec.params["damping_mult"])
    mass = float(spec.params["mass_mult"])
    vel_next = np.clip(damping * vel + (a / mass) * cfg.dt, -STATE_BOX, STATE_BOX)
    pos_next = np.clip(pos + vel_next * cfg.dt, -STATE_BOX, STATE_BOX)
    s_next = np.concatenate([pos_next, vel_next])
    return s_next, float(vel_next[0])


def true_model(spec: TaskSpec, x: np.ndarray) -> np.ndarray:
    """Exact oracle: maps probing input x = (s, a) to its label y.

    In reward-only families the label is just (r); otherwise (s', r).
    Agrees with `env_step` exactly.
    """
    cfg = get_config(spec.family)
    x = np.asarray(x, dtype=np.float64)
    if x.shape != (cfg.state_dim + cfg.action_dim,):
        raise ConfigError(f"probing input has shape {x.shape}, expected ({cfg.state_dim + cfg.action_dim},)")
    s, a = x[:cfg.state_dim], x[cfg.state_dim:]
    s_next, r = env_step(spec, s, a)
    if cfg.reward_mode == REWARD_ONLY:
        return np.array([r])
    return np.concatenate([s_next, [r]])
