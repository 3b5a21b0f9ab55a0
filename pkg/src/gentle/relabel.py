"""Probing-data construction: policy-, dynamics-, and reward-relabeling.

Every epoch, each task's augmentation buffer is rebuilt from scratch:
K1 states drawn (with replacement) from the task's own dataset and K2
from the pooled datasets of all other tasks. Each state is relabeled
with the current meta-policy's action under that task's latent, and the
outcome (s', r) comes from the task's trained ensemble model -- or from
the exact environment model in oracle mode. For reward-only families the
model supplies the reward and the shared true dynamics supply s'.

Buffers carry provenance (source task, ego flag) so tests can verify the
sampling contract; the provenance never reaches the encoder.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .datasets import TaskDataset
from .ensembles import EnsembleModel, model_predict_batch
from .envs import REWARD_ONLY, env_step, get_config
from .errors import ConfigError
from .rng import Rng


@dataclass
class AugmentConfig:
    k1: int
    k2: int
    no_policy_relabel: bool = False
    oracle_model: bool = False

    def __post_init__(self):
        if self.k1 < 0 or self.k2 < 0 or self.k1 + self.k2 < 1:
            raise ConfigError(f"need k1 >= 0, k2 >= 0, k1 + k2 >= 1; got {self.k1}, {self.k2}")


@dataclass
class AugmentBuffer:
    """Relabeled pseudo-transitions for one task, with test-only provenance."""

    task_id: int
    s: np.ndarray
    a: np.ndarray
    s_next: np.ndarray
    r: np.ndarray
    source_task: np.ndarray  # provenance: dataset each state was drawn from
    ego: np.ndarray          # provenance: True where drawn from the task's own data

    def __len__(self):
        return self.s.shape[0]

    def probing_inputs(self) -> np.ndarray:
        return np.concatenate([self.s, self.a], axis=1)

    def labels(self, mode: str) -> np.ndarray:
        r = self.r[:, None]
        if mode == REWARD_ONLY:
            return r
        return np.concatenate([self.s_next, r], axis=1)


def augment(datasets: Sequence[TaskDataset], models: Sequence[EnsembleModel],
            policy: Callable[[np.ndarray, np.ndarray], np.ndarray],
            zs: Sequence[np.ndarray], cfg: AugmentConfig, seed: int) -> list[AugmentBuffer]:
    """Build one augmentation buffer per task; replaces any previous buffers.

    `policy` maps a batch of states plus one task latent to a batch of
    actions. Under `no_policy_relabel` the action stored with each
    sampled transition is kept instead.
    """
    n_tasks = len(datasets)
    if not (len(models) == len(zs) == n_tasks):
        raise ConfigError("need exactly one model and one latent per task")
    if cfg.k2 > 0 and n_tasks < 2:
        raise ConfigError("k2 > 0 requires at least two tasks to donate states")

    states = [ds.states() for ds in datasets]
    actions = [ds.actions() for ds in datasets]
    sizes = np.array([len(ds) for ds in datasets])
    rng = Rng(seed)

    buffers = []
    for i, (dataset, model) in enumerate(zip(datasets, models)):
        task_rng = rng.split("augment", i)
        parts_s, parts_a, parts_src, parts_ego = [], [], [], []

        if cfg.k1 > 0:
            idx = task_rng.split("ego").integers(0, sizes[i], cfg.k1)
            parts_s.append(states[i][idx])
            parts_a.append(actions[i][idx])
            parts_src.append(np.full(cfg.k1, i))
            parts_ego.append(np.ones(cfg.k1, dtype=bool))

        if cfg.k2 > 0:
            donor_ids = [j for j in range(n_tasks) if j != i]
            donor_sizes = sizes[donor_ids]
            bounds = np.cumsum(donor_sizes)
            flat = task_rng.split("other").integers(0, int(bounds[-1]), cfg.k2)
            which = np.searchsorted(bounds, flat, side="right")
            local = flat - np.concatenate([[0], bounds[:-1]])[which]
            src = np.array([donor_ids[w] for w in which])
            parts_s.append(np.stack([states[src[k]][local[k]] for k in range(cfg.k2)]))
            parts_a.append(np.stack([actions[src[k]][local[k]] for k in range(cfg.k2)]))
            parts_src.append(src)
            parts_ego.append(np.zeros(cfg.k2, dtype=bool))

        s = np.concatenate(parts_s)
        stored_a = np.concatenate(parts_a)
        src = np.concatenate(parts_src)
        ego = np.concatenate(parts_ego)

        if cfg.no_policy_relabel:
            a = stored_a
        else:
            a = policy(s, np.asarray(zs[i]))
        s_next, r = _relabel_outcome(dataset, model, s, a, oracle=cfg.oracle_model)
        buffers.append(AugmentBuffer(i, s, a, s_next, r, src, ego))
    return buffers


def _relabel_outcome(dataset: TaskDataset, model: EnsembleModel,
                     s: np.ndarray, a: np.ndarray, oracle: bool):
    spec = dataset.spec
    cfg = get_config(spec.family)
    if oracle:
        pairs = [env_step(spec, s[k], a[k]) for k in range(s.shape[0])]
        s_next = np.stack([p[0] for p in pairs])
        r = np.array([p[1] for p in pairs])
        return s_next, r

    pred = model_predict_batch(model, np.concatenate([s, a], axis=1))
    if cfg.reward_mode == REWARD_ONLY:
        # Dynamics are shared across the family; only the reward is learned.
        s_next = np.stack([env_step(spec, s[k], a[k])[0] for k in range(s.shape[0])])
        r = pred[:, 0]
    else:
        s_next = pred[:, :-1]
        r = pred[:, -1]
    return s_next, r
