"""Evaluation protocols, representation diagnostics, and metrics persistence.

Two protocols estimate the meta-objective on a task:

* given-context -- the latent is encoded from transitions sampled out of
  an expert-collected pool in the target task.
* one-shot -- the agent first rolls out one episode under the all-zeros
  prior latent, encodes that trajectory, then is evaluated under the
  adapted latent. The adaptation episode's own return is logged but kept
  out of the headline score.

Representation quality is measured by leave-one-out k-NN task
identification over encoded context batches, plus a 2-D PCA projection
for plotting. Returns are undiscounted sums over exactly one horizon.
"""

from __future__ import annotations

import csv
import os
import warnings
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .datasets import TaskDataset, collect_dataset
from .envs import TaskSpec, env_step, get_config, initial_state
from .errors import ConfigError, GentleError
from .rng import Rng
from .tae import ContextBatch, TaePair, encode, encode_many

DEFAULT_CONTEXT_SIZE = 256
DEFAULT_EPISODES = 10
GIVEN_CONTEXT = "given_context"
ONE_SHOT = "one_shot"


@dataclass
class EvalRow:
    task_id: int
    protocol: str
    split: str
    mean_return: float
    std_return: float
    n_episodes: int
    adapt_z: np.ndarray | None = None
    prior_return: float | None = None


@dataclass
class EvalReport:
    protocol: str
    split: str
    rows: list[EvalRow] = field(default_factory=list)

    @property
    def aggregate_mean(self) -> float:
        return float(np.mean([r.mean_return for r in self.rows]))

    @property
    def aggregate_std(self) -> float:
        return float(np.std([r.mean_return for r in self.rows]))


def run_episode(spec: TaskSpec, policy: Callable[[np.ndarray], np.ndarray],
                rng: Rng, horizon: int | None = None):
    """Roll one episode; returns (undiscounted return, list of (s, a, s', r))."""
    cfg = get_config(spec.family)
    horizon = cfg.horizon if horizon is None else horizon
    s = initial_state(spec, rng)
    total = 0.0
    transitions = []
    for _ in range(horizon):
        a = policy(s)
        s_next, r = env_step(spec, s, a)
        transitions.append((s, a, s_next, r))
        total += r
        s = s_next
    return total, transitions


def _conditioned(policy_sz: Callable, z: np.ndarray) -> Callable[[np.ndarray], np.ndarray]:
    z = np.asarray(z, dtype=np.float64)
    return lambda s: policy_sz(np.concatenate([s, z])[None, :])[0]


def _context_from_transitions(transitions, mode_label_dim: int) -> ContextBatch:
    x = np.stack([np.concatenate([s, a]) for s, a, _, _ in transitions])
    if mode_label_dim == 1:
        y = np.array([[r] for _, _, _, r in transitions])
    else:
        y = np.stack([np.concatenate([s_next, [r]]) for _, _, s_next, r in transitions])
    return ContextBatch(x, y)


def make_expert_pool(spec: TaskSpec, seed: int, n_traj: int = 100,
                     task_id: int = 0) -> TaskDataset:
    """Ad-hoc expert context pool, drawn from an evaluation-only seed stream."""
    cfg = get_config(spec.family)
    eval_seed = int(Rng(seed).split("eval_pool", task_id).integers(0, 2 ** 31))
    return collect_dataset(spec, "expert", n_traj, cfg.horizon, eval_seed, task_id=task_id)


def eval_given_context(policy_sz: Callable, pair: TaePair, spec: TaskSpec,
                       expert_pool: TaskDataset, episodes: int, seed: int,
                       split: str = "test", task_id: int = 0,
                       context_size: int = DEFAULT_CONTEXT_SIZE) -> EvalRow:
    """Evaluate with a latent encoded from expert-collected context."""
    rng = Rng(seed).split("given", task_id)
    pool_n = len(expert_pool)
    if pool_n < context_size:
        warnings.warn(f"expert pool ({pool_n}) smaller than context size "
                      f"({context_size}); sampling with replacement")
        idx = rng.split("ctx").integers(0, pool_n, context_size)
    else:
        idx = rng.split("ctx").choice(pool_n, context_size, replace=False)
    ctx = ContextBatch(expert_pool.probing_inputs()[idx], expert_pool.labels()[idx])
    z = encode(pair, ctx)

    returns = _run_episodes(spec, policy_sz, z, episodes, rng.split("episodes"))
    return EvalRow(task_id, GIVEN_CONTEXT, split, float(np.mean(returns)),
                   float(np.std(returns)), episodes, adapt_z=z)


def eval_one_shot(policy_sz: Callable, pair: TaePair, spec: TaskSpec,
                  episodes: int, seed: int, split: str = "test",
                  task_id: int = 0) -> EvalRow:
    """Adapt from a single zero-prior rollout, then evaluate under the adapted latent."""
    cfg = get_config(spec.family)
    rng = Rng(seed).split("one_shot", task_id)
    z_prior = np.zeros(pair.latent_dim)
    prior_return, transitions = run_episode(spec, _conditioned(policy_sz, z_prior),
                                            rng.split("adapt"))
    ctx = _context_from_transitions(transitions, cfg.label_dim)
    z_adapt = encode(pair, ctx)

    returns = _run_episodes(spec, policy_sz, z_adapt, episodes, rng.split("episodes"))
    return EvalRow(task_id, ONE_SHOT, split, float(np.mean(returns)),
                   float(np.std(returns)), episodes, adapt_z=z_adapt,
                   prior_return=prior_return)


def _run_episodes(spec, policy_sz, z, episodes, rng):
    if episodes < 1:
        raise ConfigError(f"episodes must be >= 1, got {episodes}")
    returns = []
    for ep in range(episodes):
        ret, _ = run_episode(spec, _conditioned(policy_sz, z), rng.split(ep))
        returns.append(ret)
    return np.array(returns)


def evaluate_task_set(policy_sz: Callable, pair: TaePair, specs: Sequence[TaskSpec],
                      protocol: str, episodes: int, seed: int, split: str,
                      expert_pools: Sequence[TaskDataset] | None = None,
                      context_size: int = DEFAULT_CONTEXT_SIZE) -> EvalReport:
    report = EvalReport(protocol, split)
    for t, spec in enumerate(specs):
        if protocol == GIVEN_CONTEXT:
            pool = expert_pools[t] if expert_pools is not None else make_expert_pool(spec, seed, task_id=t)
            row = eval_given_context(policy_sz, pair, spec, pool, episodes, seed,
                                     split=split, task_id=t, context_size=context_size)
        elif protocol == ONE_SHOT:
            row = eval_one_shot(policy_sz, pair, spec, episodes, seed, split=split, task_id=t)
        else:
            raise ConfigError(f"unknown protocol {protocol!r}")
        report.rows.append(row)
    return report


# ---------------------------------------------------------------------------
# Representation diagnostics

@dataclass
class DiagnosticsResult:
    knn_accuracy: float
    projection: np.ndarray  # (points, 2)
    zs: np.ndarray          # (points, latent_dim)
    labels: np.ndarray      # (points,) task ids
    degenerate: bool = False


def knn_accuracy(zs: np.ndarray, labels: np.ndarray, k: int = 5) -> float:
    """Leave-one-out k-NN task identification.

    Neighbors are ordered by (distance, index) and label ties resolve to
    the lowest task id, so the result is fully deterministic.
    """
    zs = np.asarray(zs, dtype=np.float64)
    labels = np.asarray(labels)
    n = zs.shape[0]
    if n < 2:
        raise ConfigError("k-NN needs at least two points")
    d2 = np.sum((zs[:, None, :] - zs[None, :, :]) ** 2, axis=-1)
    correct = 0
    for i in range(n):
        order = sorted((d2[i, j], j) for j in range(n) if j != i)
        votes: dict = {}
        for _, j in order[:k]:
            votes[labels[j]] = votes.get(labels[j], 0) + 1
        best = max(votes.values())
        predicted = min(lab for lab, c in votes.items() if c == best)
        correct += int(predicted == labels[i])
    return correct / n


def pca_2d(zs: np.ndarray) -> tuple[np.ndarray, bool]:
    """Top-2 principal component coordinates with a deterministic sign convention."""
    zs = np.asarray(zs, dtype=np.float64)
    centered = zs - zs.mean(axis=0)
    if np.allclose(centered, 0.0):
        return np.zeros((zs.shape[0], 2)), True
    _, _, vt = np.linalg.svd(centered, full_matrices=False)
    comps = vt[:2]
    if comps.shape[0] < 2:
        comps = np.vstack([comps, np.zeros(zs.shape[1])])
    for row in range(2):
        j = int(np.argmax(np.abs(comps[row])))
        if comps[row, j] < 0:
            comps[row] = -comps[row]
    return centered @ comps.T, False


def sample_dataset_contexts(dataset: TaskDataset, resamples: int, rng: Rng,
                            context_size: int = DEFAULT_CONTEXT_SIZE) -> list[ContextBatch]:
    x = dataset.probing_inputs()
    y = dataset.labels()
    contexts = []
    for r in range(resamples):
        idx = rng.split(r).integers(0, x.shape[0], context_size)
        contexts.append(ContextBatch(x[idx], y[idx]))
    return contexts


def collect_oneshot_contexts(policy_sz: Callable, pair: TaePair, spec: TaskSpec,
                             resamples: int, rng: Rng) -> list[ContextBatch]:
    """Contexts the one-shot protocol would see: zero-prior policy rollouts."""
    cfg = get_config(spec.family)
    z_prior = np.zeros(pair.latent_dim)
    contexts = []
    for r in range(resamples):
        _, transitions = run_episode(spec, _conditioned(policy_sz, z_prior), rng.split(r))
        contexts.append(_context_from_transitions(transitions, cfg.label_dim))
    return contexts


def rep_diagnostics(pair: TaePair, contexts_by_task: Sequence[Sequence[ContextBatch]],
                    k: int = 5) -> DiagnosticsResult:
    """Encode per-task context batches, score k-NN task id, project to 2-D."""
    if len(contexts_by_task) < 2:
        raise ConfigError("diagnostics need contexts from at least 2 tasks")
    flat = [c for contexts in contexts_by_task for c in contexts]
    labels = np.concatenate([[t] * len(contexts) for t, contexts in enumerate(contexts_by_task)])
    zs = encode_many(pair, flat)
    accuracy = knn_accuracy(zs, labels, k=k)
    projection, degenerate = pca_2d(zs)
    return DiagnosticsResult(accuracy, projection, zs, labels, degenerate)


def diagnostics_from_datasets(pair: TaePair, datasets: Sequence[TaskDataset],
                              resamples: int, seed: int, k: int = 5,
                              context_size: int = DEFAULT_CONTEXT_SIZE) -> DiagnosticsResult:
    rng = Rng(seed).split("diag")
    contexts = [sample_dataset_contexts(ds, resamples, rng.split(t), context_size)
                for t, ds in enumerate(datasets)]
    return rep_diagnostics(pair, contexts, k=k)


# ---------------------------------------------------------------------------
# CSV persistence (single writer, append-safe)

METRICS_HEADER = ["epoch", "step", "split", "metric", "value"]


class _FileLock:
    def __init__(self, path):
        self.lock_path = str(path) + ".lock"
        self.fd = None

    def __enter__(self):
        try:
            self.fd = os.open(self.lock_path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
        except FileExistsError:
            raise GentleError(f"another writer holds the lock: {self.lock_path}") from None
        return self

    def __exit__(self, *exc):
        if self.fd is not None:
            os.close(self.fd)
            os.remove(self.lock_path)
        return False


def _format_value(v) -> str:
    if isinstance(v, float):
        return repr(v)
    return str(v)


def export_metrics(rows: Sequence[tuple], path) -> None:
    """Append metric rows (epoch, step, split, metric, value) under a lock file."""
    with _FileLock(path):
        new_file = not os.path.exists(path) or os.path.getsize(path) == 0
        with open(path, "a", newline="") as f:
            writer = csv.writer(f)
            if new_file:
                writer.writerow(METRICS_HEADER)
            for row in rows:
                epoch, step, split, metric, value = row
                writer.writerow([epoch, step, split, metric, _format_value(float(value))])


def read_metrics(path) -> list[tuple]:
    rows = []
    with open(path, newline="") as f:
        reader = csv.reader(f)
        header = next(reader, None)
        if header != METRICS_HEADER:
            raise GentleError(f"{path}: unexpected metrics header {header}")
        for row in reader:
            rows.append((int(row[0]), int(row[1]), row[2], row[3], float(row[4])))
    return rows


def export_reps(task_ids: Sequence[int], splits: Sequence[str], zs: np.ndarray,
                projection: np.ndarray, path) -> None:
    """Write latent rows (task_id, split, z1..zm, proj_x, proj_y) under a lock file."""
    zs = np.atleast_2d(np.asarray(zs, dtype=np.float64))
    m = zs.shape[1] if zs.size else 0
    header = ["task_id", "split"] + [f"z{i + 1}" for i in range(m)] + ["proj_x", "proj_y"]
    with _FileLock(path):
        new_file = not os.path.exists(path) or os.path.getsize(path) == 0
        with open(path, "a", newline="") as f:
            writer = csv.writer(f)
            if new_file:
                writer.writerow(header)
            for i, (task_id, split) in enumerate(zip(task_ids, splits)):
                row = [task_id, split]
                row += [repr(float(v)) for v in zs[i]]
                row += [repr(float(projection[i, 0])), repr(float(projection[i, 1]))]
                writer.writerow(row)
