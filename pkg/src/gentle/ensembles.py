"""Per-task ensemble regression models used to label relabeled probing data.

Each task gets an ensemble of 7 identically-shaped MLPs that regress
normalized (s, a) onto the normalized label -- the full (s', r) for
families whose dynamics vary, reward only otherwise. Members share the
train/holdout split and epoch shuffling and differ only by their
initialization stream; each early-stops once its holdout error has not
improved for `patience` consecutive epochs and keeps its best snapshot.
The ensemble predicts with the de-normalized mean of its members, so the
whole pipeline stays deterministic.

An ensemble can also run in oracle mode, delegating to the environment's
exact model instead of the trained members.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

import numpy as np

from . import nn
from .datasets import TaskDataset
from .envs import REWARD_ONLY, TaskSpec, get_config, true_model
from .errors import ConfigError, DataFormatError, MissingInputError
from .rng import Rng

N_MEMBERS = 7
SCHEMA_VERSION = 1
_STD_FLOOR = 1e-8


@dataclass
class ModelTrainConfig:
    holdout_frac: float = 0.2
    patience: int = 5
    lr: float = 1e-3
    batch_size: int = 64
    max_epochs: int = 200
    width: int = 64
    depth: int = 3  # number of weight layers
    n_members: int = N_MEMBERS

    def __post_init__(self):
        if not (0.0 < self.holdout_frac < 1.0):
            raise ConfigError(f"holdout_frac must be in (0,1), got {self.holdout_frac}")
        if self.patience < 1:
            raise ConfigError(f"patience must be >= 1, got {self.patience}")

    @classmethod
    def for_family(cls, family: str, **overrides) -> "ModelTrainConfig":
        if family == "point_robot":
            base = dict(width=64, depth=3)
        else:
            base = dict(width=256, depth=4)
        base.update(overrides)
        return cls(**base)


@dataclass
class MemberInfo:
    epochs_run: int
    best_epoch: int
    best_holdout_mse: float


@dataclass
class EnsembleModel:
    task_id: int
    members: list[nn.Mlp]
    x_mean: np.ndarray
    x_std: np.ndarray
    y_mean: np.ndarray
    y_std: np.ndarray
    mode: str  # reward mode of the family
    oracle_spec: TaskSpec | None = None
    train_info: list[MemberInfo] = field(default_factory=list)

    @property
    def input_dim(self) -> int:
        return self.x_mean.shape[0]

    @property
    def output_dim(self) -> int:
        return self.y_mean.shape[0]


def _normalization(values: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    mean = values.mean(axis=0)
    std = np.maximum(values.std(axis=0), _STD_FLOOR)
    return mean, std


def train_task_model(dataset: TaskDataset, cfg: ModelTrainConfig, seed: int) -> EnsembleModel:
    """Train one ensemble by MSE regression with per-member early stopping."""
    from ._threads import blas_workers
    with blas_workers():
        return _train_task_model(dataset, cfg, seed)


def _train_task_model(dataset: TaskDataset, cfg: ModelTrainConfig, seed: int) -> EnsembleModel:
    if len(dataset) == 0:
        raise ConfigError("cannot train a model on an empty dataset")
    x = dataset.probing_inputs()
    y = dataset.labels()
    n = x.shape[0]
    n_holdout = int(n * cfg.holdout_frac)
    if n - n_holdout < cfg.batch_size:
        raise ConfigError(
            f"dataset too small: {n - n_holdout} training rows < batch size {cfg.batch_size}")

    x_mean, x_std = _normalization(x)
    y_mean, y_std = _normalization(y)
    xn = (x - x_mean) / x_std
    yn = (y - y_mean) / y_std

    rng = Rng(seed).split("model", dataset.task_id)
    perm = rng.split("holdout").permutation(n)
    holdout_idx, train_idx = perm[:n_holdout], perm[n_holdout:]
    x_tr, y_tr = xn[train_idx], yn[train_idx]
    x_ho, y_ho = xn[holdout_idx], yn[holdout_idx]
    n_tr = x_tr.shape[0]

    dims = [x.shape[1]] + [cfg.width] * (cfg.depth - 1) + [y.shape[1]]
    members, infos = [], []
    for j in range(cfg.n_members):
        mlp = nn.mlp_init(dims, rng.split("init", j))
        opt = nn.adam_init(mlp, cfg.lr)
        best_mse = np.inf
        best_params = mlp.copy()
        best_epoch = 0
        bad_epochs = 0
        epoch = 0
        while epoch < cfg.max_epochs:
            epoch += 1
            order = rng.split("shuffle", epoch).permutation(n_tr)
            for start in range(0, n_tr - cfg.batch_size + 1, cfg.batch_size):
                idx = order[start:start + cfg.batch_size]
                xb, yb = x_tr[idx], y_tr[idx]

                def mse(pred, target=yb):
                    diff = pred - target
                    return float(np.mean(diff * diff)), 2.0 * diff / diff.size

                _, grads = nn.mlp_gradient(mlp, xb, mse)
                nn.adam_step(opt, mlp, grads)
            pred = nn.mlp_forward_batch(mlp, x_ho)
            mse_ho = float(np.mean((pred - y_ho) ** 2))
            if mse_ho < best_mse:
                best_mse = mse_ho
                best_params = mlp.copy()
                best_epoch = epoch
                bad_epochs = 0
            else:
                bad_epochs += 1
            if bad_epochs >= cfg.patience:
                break
        members.append(best_params)
        infos.append(MemberInfo(epochs_run=epoch, best_epoch=best_epoch, best_holdout_mse=best_mse))

    return EnsembleModel(dataset.task_id, members, x_mean, x_std, y_mean, y_std,
                         mode=get_config(dataset.spec.family).reward_mode,
                         train_info=infos)


def model_predict_batch(model: EnsembleModel, x: np.ndarray) -> np.ndarray:
    """De-normalized mean of the member outputs over a batch of (s, a) rows."""
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    if not np.all(np.isfinite(x)):
        raise ConfigError("model_predict requires finite inputs")
    if model.oracle_spec is not None:
        return np.stack([true_model(model.oracle_spec, row) for row in x])
    xn = (x - model.x_mean) / model.x_std
    total = np.zeros((x.shape[0], model.output_dim))
    for member in model.members:
        total += nn.mlp_forward_batch(member, xn)
    mean = total / len(model.members)
    return mean * model.y_std + model.y_mean


def model_predict(model: EnsembleModel, x: np.ndarray) -> np.ndarray:
    return model_predict_batch(model, x)[0]


def make_oracle_model(spec: TaskSpec, task_id: int) -> EnsembleModel:
    """An ensemble stand-in that answers with the environment's exact model."""
    cfg = get_config(spec.family)
    d_in = cfg.state_dim + cfg.action_dim
    d_out = cfg.label_dim
    return EnsembleModel(task_id, [], np.zeros(d_in), np.ones(d_in),
                         np.zeros(d_out), np.ones(d_out), mode=cfg.reward_mode,
                         oracle_spec=spec)


# ---------------------------------------------------------------------------
# Persistence: binary member snapshots + a JSON sidecar per task

def save_model(model: EnsembleModel, out_dir) -> None:
    os.makedirs(out_dir, exist_ok=True)
    stem = f"model_task_{model.task_id:03d}"
    for j, member in enumerate(model.members):
        nn.save_mlp(os.path.join(out_dir, f"{stem}_member{j}.bin"), member)
    sidecar = {
        "schema_version": SCHEMA_VERSION,
        "task_id": model.task_id,
        "n_members": len(model.members),
        "mode": model.mode,
        "x_mean": model.x_mean.tolist(),
        "x_std": model.x_std.tolist(),
        "y_mean": model.y_mean.tolist(),
        "y_std": model.y_std.tolist(),
    }
    with open(os.path.join(out_dir, f"{stem}.json"), "w") as f:
        json.dump(sidecar, f, indent=2, sort_keys=True)


def load_model(model_dir, task_id: int) -> EnsembleModel:
    stem = f"model_task_{task_id:03d}"
    sidecar_path = os.path.join(model_dir, f"{stem}.json")
    if not os.path.exists(sidecar_path):
        raise MissingInputError(f"model sidecar not found: {sidecar_path}")
    with open(sidecar_path) as f:
        sidecar = json.load(f)
    if sidecar.get("schema_version") != SCHEMA_VERSION:
        raise DataFormatError(f"{sidecar_path}: unsupported schema version")
    members = []
    for j in range(sidecar["n_members"]):
        path = os.path.join(model_dir, f"{stem}_member{j}.bin")
        if not os.path.exists(path):
            raise MissingInputError(f"model member snapshot not found: {path}")
        members.append(nn.load_mlp(path))
    return EnsembleModel(
        task_id=sidecar["task_id"],
        members=members,
        x_mean=np.array(sidecar["x_mean"]),
        x_std=np.array(sidecar["x_std"]),
        y_mean=np.array(sidecar["y_mean"]),
        y_std=np.array(sidecar["y_std"]),
        mode=sidecar["mode"],
    )
