"""Offline dataset collection with scripted behavior policies.

Scripted experts stand in for RL-trained data collectors: the point
robot walks greedily toward its goal, the point mass pushes at full
forward force. Lower-quality variants add action noise -- `medium` a
fixed Gaussian at one action-bound sigma, `mixed` a per-trajectory noise
tier drawn from five levels, imitating data logged from checkpoints of
an improving policy.

Datasets are stored one CSV per task (17 significant digits, lossless
for float64) plus a JSON manifest per directory.
"""

from __future__ import annotations

import csv
import json
import os
from dataclasses import dataclass, field

import numpy as np

from .envs import TaskSpec, env_step, get_config, initial_state
from .errors import ConfigError, DataFormatError, MissingInputError
from .rng import Rng

SCHEMA_VERSION = 1
QUALITIES = ("expert", "medium", "mixed")
MIXED_TIERS = (0.0, 0.25, 0.5, 0.75, 1.0)


@dataclass
class Transition:
    s: np.ndarray
    a: np.ndarray
    s_next: np.ndarray
    r: float
    traj_id: int
    step_idx: int


@dataclass
class TaskDataset:
    task_id: int
    spec: TaskSpec
    transitions: list[Transition]
    quality: str
    _arrays: dict = field(default_factory=dict, repr=False)

    def __len__(self):
        return len(self.transitions)

    def _stack(self, key, getter):
        if key not in self._arrays:
            self._arrays[key] = np.asarray([getter(t) for t in self.transitions], dtype=np.float64)
        return self._arrays[key]

    def states(self) -> np.ndarray:
        return self._stack("s", lambda t: t.s)

    def actions(self) -> np.ndarray:
        return self._stack("a", lambda t: t.a)

    def next_states(self) -> np.ndarray:
        return self._stack("s_next", lambda t: t.s_next)

    def rewards(self) -> np.ndarray:
        return self._stack("r", lambda t: t.r)

    def labels(self) -> np.ndarray:
        """Probing labels per the family's reward mode: (r) or (s', r)."""
        cfg = get_config(self.spec.family)
        r = self.rewards()[:, None]
        if cfg.label_dim == 1:
            return r
        return np.concatenate([self.next_states(), r], axis=1)

    def probing_inputs(self) -> np.ndarray:
        return np.concatenate([self.states(), self.actions()], axis=1)


def expert_action(spec: TaskSpec, s: np.ndarray) -> np.ndarray:
    cfg = get_config(spec.family)
    if spec.family == "point_robot":
        return np.clip(spec.goal - np.asarray(s), -cfg.action_bound, cfg.action_bound)
    return np.array([cfg.action_bound, 0.0])


class ScriptedPolicy:
    """Behavior policy at a controllable quality level.

    `begin_trajectory` must be called at each episode start; for the
    mixed quality it draws the trajectory's noise tier.
    """

    def __init__(self, spec: TaskSpec, quality: str, rng: Rng):
        if quality not in QUALITIES:
            raise ConfigError(f"quality must be one of {QUALITIES}, got {quality!r}")
        self.spec = spec
        self.quality = quality
        self.rng = rng
        self.cfg = get_config(spec.family)
        self.noise_scale = 0.0 if quality == "expert" else self.cfg.action_bound

    def begin_trajectory(self):
        if self.quality == "mixed":
            tier = MIXED_TIERS[int(self.rng.integers(0, len(MIXED_TIERS)))]
            self.noise_scale = tier * self.cfg.action_bound

    def __call__(self, s: np.ndarray) -> np.ndarray:
        a = expert_action(self.spec, s)
        if self.noise_scale > 0.0:
            a = a + self.rng.normal(0.0, self.noise_scale, a.shape)
        return np.clip(a, -self.cfg.action_bound, self.cfg.action_bound)


def scripted_policy(spec: TaskSpec, s: np.ndarray, quality: str, rng: Rng,
                    noise_scale: float | None = None) -> np.ndarray:
    """Single-step functional form of `ScriptedPolicy`.

    For `mixed`, the per-trajectory tier must be supplied as `noise_scale`
    (times the action bound is already applied by the caller).
    """
    cfg = get_config(spec.family)
    a = expert_action(spec, s)
    if quality == "expert":
        scale = 0.0
    elif quality == "medium":
        scale = cfg.action_bound
    elif quality == "mixed":
        if noise_scale is None:
            raise ConfigError("mixed quality needs an explicit per-trajectory noise_scale")
        scale = noise_scale
    else:
        raise ConfigError(f"quality must be one of {QUALITIES}, got {quality!r}")
    if scale > 0.0:
        a = a + rng.normal(0.0, scale, a.shape)
    return np.clip(a, -cfg.action_bound, cfg.action_bound)


def collect_dataset(spec: TaskSpec, quality: str, n_traj: int, horizon: int,
                    seed: int, task_id: int = 0) -> TaskDataset:
    """Roll out `n_traj` complete trajectories of `horizon` steps each."""
    if n_traj < 1:
        raise ConfigError(f"n_traj must be >= 1, got {n_traj}")
    rng = Rng(seed).split("collect", task_id)
    policy = ScriptedPolicy(spec, quality, rng.split("policy"))
    init_rng = rng.split("init")
    transitions = []
    for traj in range(n_traj):
        policy.begin_trajectory()
        s = initial_state(spec, init_rng)
        for step in range(horizon):
            a = policy(s)
            s_next, r = env_step(spec, s, a)
            transitions.append(Transition(s, a, s_next, r, traj, step))
            s = s_next
    return TaskDataset(task_id, spec, transitions, quality)


def episode_return(transitions) -> float:
    return float(sum(t.r for t in transitions))


def optimal_return_point_robot(spec: TaskSpec, s0: np.ndarray, horizon: int) -> float:
    """Best possible return under the box action set, in closed form.

    Each coordinate can approach the goal by at most bound*dt per step,
    independently, so the componentwise-greedy path is optimal for any
    norm of the residual.
    """
    cfg = get_config(spec.family)
    delta = np.abs(spec.goal - np.asarray(s0, dtype=np.float64))
    total = 0.0
    step = cfg.action_bound * cfg.dt
    for _ in range(horizon):
        delta = np.maximum(delta - step, 0.0)
        total -= float(np.linalg.norm(delta))
    return total


# ---------------------------------------------------------------------------
# On-disk format

def _csv_columns(spec: TaskSpec) -> list[str]:
    cfg = get_config(spec.family)
    cols = ["traj", "step"]
    cols += [f"s{i}" for i in range(cfg.state_dim)]
    cols += [f"a{i}" for i in range(cfg.action_dim)]
    cols += [f"s_next{i}" for i in range(cfg.state_dim)]
    cols += ["r"]
    return cols


def save_dataset(dataset: TaskDataset, path) -> None:
    cols = _csv_columns(dataset.spec)
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(cols)
        for t in dataset.transitions:
            row = [t.traj_id, t.step_idx]
            row += [f"{v:.17g}" for v in t.s]
            row += [f"{v:.17g}" for v in t.a]
            row += [f"{v:.17g}" for v in t.s_next]
            row += [f"{t.r:.17g}"]
            writer.writerow(row)


def load_dataset(path, spec: TaskSpec, task_id: int, quality: str,
                 expected_rows: int | None = None) -> TaskDataset:
    if not os.path.exists(path):
        raise MissingInputError(f"dataset file not found: {path}")
    cfg = get_config(spec.family)
    cols = _csv_columns(spec)
    transitions = []
    with open(path, newline="") as f:
        reader = csv.reader(f)
        header = next(reader, None)
        if header != cols:
            raise DataFormatError(f"{path}: unexpected columns {header}")
        ds, da = cfg.state_dim, cfg.action_dim
        for row in reader:
            if len(row) != len(cols):
                raise DataFormatError(f"{path}: malformed row with {len(row)} fields")
            vals = [float(v) for v in row[2:]]
            transitions.append(Transition(
                s=np.array(vals[:ds]),
                a=np.array(vals[ds:ds + da]),
                s_next=np.array(vals[ds + da:2 * ds + da]),
                r=vals[-1],
                traj_id=int(row[0]),
                step_idx=int(row[1]),
            ))
    if expected_rows is not None and len(transitions) != expected_rows:
        raise DataFormatError(
            f"{path}: expected {expected_rows} rows from the manifest, found {len(transitions)}")
    return TaskDataset(task_id, spec, transitions, quality)


@dataclass
class ManifestEntry:
    task_id: int
    split: str
    file: str
    spec: TaskSpec


@dataclass
class DatasetManifest:
    family: str
    quality: str
    seed: int
    n_traj: int
    horizon: int
    entries: list[ManifestEntry]
    schema_version: int = SCHEMA_VERSION

    def to_json(self) -> dict:
        return {
            "schema_version": self.schema_version,
            "family": self.family,
            "quality": self.quality,
            "seed": self.seed,
            "n_traj": self.n_traj,
            "horizon": self.horizon,
            "tasks": [
                {"task_id": e.task_id, "split": e.split, "file": e.file,
                 "spec": e.spec.to_json()}
                for e in self.entries
            ],
        }

    @classmethod
    def from_json(cls, obj: dict) -> "DatasetManifest":
        version = obj.get("schema_version")
        if version != SCHEMA_VERSION:
            raise DataFormatError(f"unsupported dataset schema version {version!r}")
        entries = [
            ManifestEntry(t["task_id"], t["split"], t["file"], TaskSpec.from_json(t["spec"]))
            for t in obj["tasks"]
        ]
        return cls(obj["family"], obj["quality"], obj["seed"], obj["n_traj"],
                   obj["horizon"], entries)


def collect_suite(family: str, quality: str, n_train: int, n_test: int, n_traj: int,
                  seed: int, out_dir, horizon: int | None = None) -> DatasetManifest:
    """Collect per-task datasets for train and test splits into one directory."""
    cfg = get_config(family)
    horizon = cfg.horizon if horizon is None else horizon
    os.makedirs(out_dir, exist_ok=True)
    entries = []
    task_id = 0
    from .envs import sample_tasks
    for split, count in (("train", n_train), ("test", n_test)):
        if count == 0:
            continue
        for spec in sample_tasks(family, count, seed, split=split):
            ds = collect_dataset(spec, quality, n_traj, horizon, seed, task_id=task_id)
            fname = f"task_{task_id:03d}.csv"
            save_dataset(ds, os.path.join(out_dir, fname))
            entries.append(ManifestEntry(task_id, split, fname, spec))
            task_id += 1
    manifest = DatasetManifest(family, quality, seed, n_traj, horizon, entries)
    with open(os.path.join(out_dir, "manifest.json"), "w") as f:
        json.dump(manifest.to_json(), f, indent=2, sort_keys=True)
    return manifest


def load_manifest(data_dir) -> DatasetManifest:
    path = os.path.join(data_dir, "manifest.json")
    if not os.path.exists(path):
        raise MissingInputError(f"manifest not found: {path}")
    with open(path) as f:
        try:
            obj = json.load(f)
        except json.JSONDecodeError as exc:
            raise DataFormatError(f"{path}: invalid JSON ({exc})") from None
    return DatasetManifest.from_json(obj)


def load_suite(data_dir, split: str | None = None) -> tuple[DatasetManifest, list[TaskDataset]]:
    """Load every dataset listed in a directory's manifest (optionally one split)."""
    manifest = load_manifest(data_dir)
    expected = manifest.n_traj * manifest.horizon
    datasets = []
    for entry in manifest.entries:
        if split is not None and entry.split != split:
            continue
        datasets.append(load_dataset(os.path.join(data_dir, entry.file), entry.spec,
                                     entry.task_id, manifest.quality, expected_rows=expected))
    return manifest, datasets


def verify_dataset(dataset: TaskDataset, horizon: int) -> None:
    """Check trajectory structure and exact replay consistency with env_step."""
    by_traj: dict[int, list[Transition]] = {}
    for t in dataset.transitions:
        by_traj.setdefault(t.traj_id, []).append(t)
    for traj_id, steps in by_traj.items():
        if len(steps) != horizon:
            raise DataFormatError(f"trajectory {traj_id} has {len(steps)} steps, expected {horizon}")
        for k, t in enumerate(steps):
            if t.step_idx != k:
                raise DataFormatError(f"trajectory {traj_id} step indices out of order")
            s_next, r = env_step(dataset.spec, t.s, t.a)
            if not (np.array_equal(s_next, t.s_next) and r == t.r):
                raise DataFormatError(f"trajectory {traj_id} step {k} fails env replay")
            if k + 1 < horizon and not np.array_equal(steps[k + 1].s, t.s_next):
                raise DataFormatError(f"trajectory {traj_id} breaks s_{{t+1}} = s'_t at step {k}")
