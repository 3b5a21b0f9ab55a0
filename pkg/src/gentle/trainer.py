"""Meta-training orchestration.

Each epoch rebuilds the per-task augmentation buffers by relabeling
(skipped entirely by the `no_relabel` variant), then runs S gradient
steps. Every step, in fixed order:

1. sample per-task context batches from D_i united with its buffer and
   take one encoder/decoder update (reconstruction loss, or the
   contrastive objective for that variant);
2. recompute each task's representation from a fresh context batch --
   these are constants downstream;
3. take one TD3+BC update over per-task RL batches drawn from the raw
   offline datasets, with the delayed actor update cadence.

Named RNG streams (data, model-init, relabel, tae, rl, eval) all derive
from the root seed, so ablations that alter one component leave the
others' randomness untouched. Two runs with identical config and seed
produce identical metrics, byte for byte.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import nn
from .datasets import TaskDataset
from .ensembles import EnsembleModel, make_oracle_model
from .envs import TaskSpec, get_config
from .errors import ConfigError
from .evaluation import (ONE_SHOT, diagnostics_from_datasets, eval_one_shot)
from .relabel import AugmentBuffer, AugmentConfig, augment
from .rng import Rng
from .tae import (ContextBatch, TaePair, contrastive_loss_and_grads, tae_init,
                  tae_loss_and_grads)
from .td3bc import TD3BC, TD3Config, ActorCritic, RlBatch

VARIANTS = ("gentle", "contrastive", "no_relabel", "no_policy_relabel")
PAPER_TOTAL_STEPS = 2e5


@dataclass
class TrainConfig:
    family: str = "point_robot"
    n_train_tasks: int = 10
    epochs: int = 50
    steps_per_epoch: int = 200
    tae_batch: int = 256
    rl_batch: int = 256
    k1: int = 64
    k2: int = 192
    latent_dim: int | None = None   # family default: 5 (point_robot) / 10 (point_mass)
    gamma: float | None = None      # family default: 0.9 / 0.99
    tae_lr: float = 3e-4
    rl_lr: float = 3e-4
    alpha: float = 2.5
    tae_loss_weight: float = 10.0
    tae_width: int = 64
    tae_hidden_layers: int = 3
    rl_width: int = 64
    rl_hidden_layers: int = 3
    variant: str = "gentle"
    oracle_model: bool = False
    seed: int = 0
    eval_every: int = 10            # epochs between probe evaluations; 0 disables
    eval_episodes: int = 10
    n_probe_tasks: int = 3
    diag_resamples: int = 5
    contrastive_contexts: int = 2
    # How per-step task representations are computed: "batch" encodes n
    # i.i.d. pairs from the context pool, "trajectory" encodes one stored
    # trajectory, mirroring the shape of one-shot adaptation contexts.
    rep_context: str = "batch"
    rep_context_size: int | None = None  # None -> tae_batch

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown variant {self.variant!r}; expected one of {VARIANTS}")
        if self.rep_context not in ("batch", "trajectory"):
            raise ConfigError(f"rep_context must be 'batch' or 'trajectory', got {self.rep_context!r}")
        if self.variant == "no_relabel" and self.oracle_model:
            raise ConfigError("oracle_model has no effect without relabeling; refusing the combination")
        for name in ("n_train_tasks", "epochs", "steps_per_epoch", "tae_batch", "rl_batch"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        AugmentConfig(self.k1, self.k2)  # validates the pair
        get_config(self.family)

    def resolved(self) -> "TrainConfig":
        """Fill family-dependent defaults."""
        out = dataclasses.replace(self)
        if out.latent_dim is None:
            out.latent_dim = 5 if out.family == "point_robot" else 10
        if out.gamma is None:
            out.gamma = 0.9 if out.family == "point_robot" else 0.99
        return out

    @property
    def paper_step_scale(self) -> float:
        """Fraction of the full-scale step budget this config runs."""
        return self.epochs * self.steps_per_epoch / PAPER_TOTAL_STEPS

    def to_json(self) -> dict:
        out = dataclasses.asdict(self)
        out["paper_step_scale"] = self.paper_step_scale
        return out

    @classmethod
    def from_json(cls, obj: dict) -> "TrainConfig":
        obj = dict(obj)
        obj.pop("paper_step_scale", None)
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(obj) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        return cls(**obj)


MetricRow = tuple  # (epoch, step, split, metric, value)


@dataclass
class RunArtifacts:
    config: TrainConfig
    tae: TaePair
    ac: ActorCritic
    metrics: list[MetricRow]
    final_reps: np.ndarray      # (n_tasks, latent_dim)
    task_ids: list[int] = field(default_factory=list)


def compute_task_reps(pair: TaePair, pools: Sequence[tuple], n: int, rng: Rng) -> np.ndarray:
    """Encode a fresh size-n context per task from D_i united with its buffer.

    Contexts are drawn in task order from the supplied stream. The result
    is returned as plain arrays: downstream RL updates treat them as
    constants and never reach encoder parameters.
    """
    contexts = []
    for x_pool, y_pool in pools:
        idx = rng.integers(0, x_pool.shape[0], n)
        contexts.append(ContextBatch(x_pool[idx], y_pool[idx]))
    from .tae import encode_many
    return encode_many(pair, contexts)


class MetaTrainer:
    """Runs the interleaved representation/policy optimization."""

    def __init__(self, cfg: TrainConfig, datasets: Sequence[TaskDataset],
                 models: Sequence[EnsembleModel] | None,
                 rl_datasets: Sequence[TaskDataset] | None = None):
        cfg = cfg.resolved()
        if len(datasets) != cfg.n_train_tasks:
            raise ConfigError(f"config expects {cfg.n_train_tasks} tasks, got {len(datasets)}")
        self.cfg = cfg
        self.datasets = list(datasets)
        # RL batches always come from the raw offline datasets; a separate
        # set may be supplied when context data differs (diversity sweep).
        self.rl_datasets = list(rl_datasets) if rl_datasets is not None else self.datasets
        self.env_cfg = get_config(cfg.family)

        needs_models = cfg.variant != "no_relabel" and not cfg.oracle_model
        if cfg.oracle_model:
            self.models = [make_oracle_model(ds.spec, ds.task_id) for ds in self.datasets]
        elif needs_models:
            if models is None or len(models) != len(self.datasets):
                raise ConfigError("relabeling needs one pretrained model per task")
            self.models = list(models)
        else:
            self.models = [make_oracle_model(ds.spec, ds.task_id) for ds in self.datasets]

        root = Rng(cfg.seed)
        self.rng_init = root.split("model-init")
        self.rng_relabel = root.split("relabel")
        self.rng_tae = root.split("tae")
        self.rng_rl = root.split("rl")
        self.rng_eval = root.split("eval")

        x_dim = self.env_cfg.state_dim + self.env_cfg.action_dim
        y_dim = self.env_cfg.label_dim
        self.tae = tae_init(x_dim, y_dim, cfg.latent_dim, self.rng_init.split("tae"),
                            width=cfg.tae_width, hidden_layers=cfg.tae_hidden_layers)
        self.opt_feat = nn.adam_init(self.tae.feature_net, cfg.tae_lr)
        self.opt_dec = nn.adam_init(self.tae.decoder, cfg.tae_lr)

        ac = ActorCritic.build(self.env_cfg.state_dim, cfg.latent_dim,
                               self.env_cfg.action_dim, self.env_cfg.action_bound,
                               self.rng_init.split("rl"), width=cfg.rl_width,
                               hidden_layers=cfg.rl_hidden_layers)
        self.td3 = TD3BC(ac, TD3Config(gamma=cfg.gamma, action_bound=self.env_cfg.action_bound,
                                       alpha=cfg.alpha, lr=cfg.rl_lr))

        self.raw_x = [ds.probing_inputs() for ds in self.datasets]
        self.raw_y = [ds.labels() for ds in self.datasets]
        self.buffers: list[AugmentBuffer] = []
        self.pools = [(x, y) for x, y in zip(self.raw_x, self.raw_y)]
        self.horizon = self.env_cfg.horizon
        self.n_traj = [len(ds) // self.horizon for ds in self.datasets]
        self.zs = np.zeros((len(self.datasets), cfg.latent_dim))
        self.metrics: list[MetricRow] = []
        self.global_step = 0

    # -- pieces of a step (fixed order: tae -> reps -> rl) -----------------

    def _rebuild_buffers(self, epoch: int) -> None:
        cfg = self.cfg
        if cfg.variant == "no_relabel":
            self.buffers = []
            self.pools = [(x, y) for x, y in zip(self.raw_x, self.raw_y)]
            return
        aug_cfg = AugmentConfig(cfg.k1, cfg.k2,
                                no_policy_relabel=cfg.variant == "no_policy_relabel",
                                oracle_model=cfg.oracle_model)
        ac = self.td3.ac

        def policy(states, z):
            zb = np.broadcast_to(z, (states.shape[0], z.shape[0]))
            return ac.act(np.concatenate([states, zb], axis=1))

        seed = int(self.rng_relabel.split(epoch).integers(0, 2 ** 31))
        self.buffers = augment(self.datasets, self.models, policy,
                               list(self.zs), aug_cfg, seed)
        mode = self.env_cfg.reward_mode
        self.pools = [
            (np.concatenate([x, buf.probing_inputs()]), np.concatenate([y, buf.labels(mode)]))
            for (x, y), buf in zip(zip(self.raw_x, self.raw_y), self.buffers)
        ]

    def _sample_context(self, task: int, rng: Rng) -> ContextBatch:
        x_pool, y_pool = self.pools[task]
        idx = rng.integers(0, x_pool.shape[0], self.cfg.tae_batch)
        return ContextBatch(x_pool[idx], y_pool[idx])

    def _tae_update(self, step_rng: Rng) -> float:
        cfg = self.cfg
        if cfg.variant == "contrastive":
            task_contexts = [
                [self._sample_context(t, step_rng)
                 for _ in range(cfg.contrastive_contexts)]
                for t in range(len(self.datasets))
            ]
            loss, feat_grads = contrastive_loss_and_grads(self.tae, task_contexts)
            nn.adam_step(self.opt_feat, self.tae.feature_net,
                         nn.scale_grads(feat_grads, cfg.tae_loss_weight))
            return loss
        contexts = [self._sample_context(t, step_rng) for t in range(len(self.datasets))]
        loss, feat_grads, dec_grads = tae_loss_and_grads(self.tae, contexts)
        nn.adam_step(self.opt_feat, self.tae.feature_net,
                     nn.scale_grads(feat_grads, cfg.tae_loss_weight))
        nn.adam_step(self.opt_dec, self.tae.decoder,
                     nn.scale_grads(dec_grads, cfg.tae_loss_weight))
        return loss

    def _compute_reps(self, step_rng: Rng) -> None:
        cfg = self.cfg
        if cfg.rep_context == "trajectory":
            # Encode one stored trajectory per task: the same context shape
            # the one-shot protocol produces at test time.
            from .tae import encode_many
            contexts = []
            for t in range(len(self.datasets)):
                traj = int(step_rng.integers(0, self.n_traj[t]))
                rows = slice(traj * self.horizon, (traj + 1) * self.horizon)
                contexts.append(ContextBatch(self.raw_x[t][rows], self.raw_y[t][rows]))
            self.zs = encode_many(self.tae, contexts)
            return
        n = cfg.rep_context_size or cfg.tae_batch
        self.zs = compute_task_reps(self.tae, self.pools, n, step_rng)

    def _rl_update(self, step_rng: Rng) -> tuple[float, float | None]:
        cfg = self.cfg
        batches = []
        for t, ds in enumerate(self.rl_datasets):
            idx = step_rng.integers(0, len(ds), cfg.rl_batch)
            s = ds.states()[idx]
            a = ds.actions()[idx]
            r = ds.rewards()[idx]
            s_next = ds.next_states()[idx]
            zb = np.broadcast_to(self.zs[t], (cfg.rl_batch, cfg.latent_dim))
            batches.append(RlBatch(np.concatenate([s, zb], axis=1), a, r,
                                   np.concatenate([s_next, zb], axis=1)))
        critic_loss = self.td3.critic_update(batches, step_rng)
        actor_loss = None
        if self.td3.ac.update_count % self.td3.cfg.policy_delay == 0:
            actor_loss, _ = self.td3.actor_update(batches)
        return critic_loss, actor_loss

    # -- main loop ----------------------------------------------------------

    def run(self) -> RunArtifacts:
        from ._threads import blas_workers
        with blas_workers():
            return self._run()

    def _run(self) -> RunArtifacts:
        cfg = self.cfg
        for epoch in range(1, cfg.epochs + 1):
            self._rebuild_buffers(epoch)
            tae_losses, critic_losses, actor_losses = [], [], []
            for _ in range(cfg.steps_per_epoch):
                self.global_step += 1
                tae_losses.append(self._tae_update(self.rng_tae))
                self._compute_reps(self.rng_tae)
                critic_loss, actor_loss = self._rl_update(self.rng_rl)
                critic_losses.append(critic_loss)
                if actor_loss is not None:
                    actor_losses.append(actor_loss)
            self._emit_epoch_metrics(epoch, tae_losses, critic_losses, actor_losses)
            if cfg.eval_every and epoch % cfg.eval_every == 0:
                self._probe_eval(epoch)
        return RunArtifacts(cfg, self.tae, self.td3.ac, self.metrics, self.zs.copy(),
                            [ds.task_id for ds in self.datasets])

    def _emit_epoch_metrics(self, epoch, tae_losses, critic_losses, actor_losses):
        step = self.global_step
        rows = [
            (epoch, step, "train", "tae_loss", float(np.mean(tae_losses))),
            (epoch, step, "train", "critic_loss", float(np.mean(critic_losses))),
        ]
        if actor_losses:
            rows.append((epoch, step, "train", "actor_loss", float(np.mean(actor_losses))))
        # k-NN task identification from one-shot-style contexts; contexts
        # resampled from the datasets saturate the score trivially.
        from .evaluation import collect_oneshot_contexts, rep_diagnostics
        diag_rng = self.rng_eval.split("diag", epoch)
        policy_sz = self.td3.ac.policy()
        contexts = [collect_oneshot_contexts(policy_sz, self.tae, ds.spec,
                                             self.cfg.diag_resamples, diag_rng.split(t))
                    for t, ds in enumerate(self.datasets)]
        diag = rep_diagnostics(self.tae, contexts)
        rows.append((epoch, step, "train", "rep_knn_accuracy", diag.knn_accuracy))
        self.metrics.extend(rows)

    def _probe_eval(self, epoch):
        cfg = self.cfg
        n_probe = min(cfg.n_probe_tasks, len(self.datasets))
        policy_sz = self.td3.ac.policy()
        returns = []
        for t in range(n_probe):
            seed = int(self.rng_eval.split("probe", epoch, t).integers(0, 2 ** 31))
            row = eval_one_shot(policy_sz, self.tae, self.datasets[t].spec,
                                cfg.eval_episodes, seed, split="train", task_id=t)
            returns.append(row.mean_return)
        self.metrics.append((epoch, self.global_step, "train", "one_shot_return",
                             float(np.mean(returns))))


def meta_train(cfg: TrainConfig, datasets: Sequence[TaskDataset],
               models: Sequence[EnsembleModel] | None = None,
               rl_datasets: Sequence[TaskDataset] | None = None) -> RunArtifacts:
    """Train the full pipeline per the config; see `MetaTrainer`."""
    return MetaTrainer(cfg, datasets, models, rl_datasets=rl_datasets).run()


def save_run_artifacts(run: RunArtifacts, out_dir) -> dict:
    """Write snapshots, metrics.csv, and reps.csv; returns artifact paths."""
    import os

    from . import tae as tae_mod
    from .evaluation import export_metrics, export_reps, pca_2d

    os.makedirs(out_dir, exist_ok=True)
    paths = {}
    enc = os.path.join(out_dir, "tae_encoder.bin")
    dec = os.path.join(out_dir, "tae_decoder.bin")
    tae_mod.save_tae(run.tae, enc, dec)
    paths["tae_encoder"] = enc
    paths["tae_decoder"] = dec
    for name, net in (("actor", run.ac.actor), ("critic1", run.ac.critic1),
                      ("critic2", run.ac.critic2)):
        p = os.path.join(out_dir, f"{name}.bin")
        nn.save_mlp(p, net)
        paths[name] = p
    meta = {
        "family": run.config.family,
        "latent_dim": run.config.latent_dim,
        "action_bound": get_config(run.config.family).action_bound,
        "state_dim": get_config(run.config.family).state_dim,
        "action_dim": get_config(run.config.family).action_dim,
    }
    meta_path = os.path.join(out_dir, "nets_meta.json")
    with open(meta_path, "w") as f:
        json.dump(meta, f, indent=2, sort_keys=True)
    paths["nets_meta"] = meta_path

    metrics_path = os.path.join(out_dir, "metrics.csv")
    export_metrics(run.metrics, metrics_path)
    paths["metrics"] = metrics_path

    projection, _ = pca_2d(run.final_reps)
    reps_path = os.path.join(out_dir, "reps.csv")
    export_reps(run.task_ids, ["train"] * len(run.task_ids), run.final_reps,
                projection, reps_path)
    paths["reps"] = reps_path
    return paths
