"""TD3+BC policy optimization on top of detached task representations.

The actor maps (s ++ z) to a bounded action through a tanh output head;
twin critics score (s ++ z ++ a). Internally both networks work in
units of the action bound (actions normalized to [-1, 1]) so the usual
balance between the value term and the behavior-cloning term holds
regardless of the family's action scale; `act` returns de-normalized
actions. Critic targets use the smoothed target-policy action
clip(actor'(s') + clip(N(0, 0.2), +-0.5), +-1) -- the backbone's
conventions in normalized units -- and the minimum of the two target
critics, with no termination masking (fixed-horizon tasks bootstrap
through time limits). Actor updates maximize
lambda * Q1(s, pi(s)) - ||pi(s) - a||^2 where lambda is recomputed per
task batch from the current Q1 magnitudes, then soft-sync the targets.
Latents enter as constants: nothing here touches encoder parameters.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import nn
from .errors import ConfigError
from .rng import Rng

LAMBDA_FLOOR = 1e-8


@dataclass
class TD3Config:
    gamma: float
    action_bound: float
    alpha: float = 2.5
    tau: float = 0.005
    policy_delay: int = 2
    policy_noise: float = 0.2  # std of target smoothing noise, normalized units
    noise_clip: float = 0.5    # clip for that noise, normalized units
    lr: float = 3e-4


@dataclass
class ActorCritic:
    actor: nn.Mlp
    critic1: nn.Mlp
    critic2: nn.Mlp
    target_actor: nn.Mlp
    target_critic1: nn.Mlp
    target_critic2: nn.Mlp
    action_bound: float
    update_count: int = 0

    @classmethod
    def build(cls, state_dim: int, latent_dim: int, action_dim: int, action_bound: float,
              rng: Rng, width: int = 64, hidden_layers: int = 3) -> "ActorCritic":
        actor_dims = [state_dim + latent_dim] + [width] * hidden_layers + [action_dim]
        critic_dims = [state_dim + latent_dim + action_dim] + [width] * hidden_layers + [1]
        actor = nn.mlp_init(actor_dims, rng.split("actor"), output_activation="tanh")
        critic1 = nn.mlp_init(critic_dims, rng.split("critic1"))
        critic2 = nn.mlp_init(critic_dims, rng.split("critic2"))
        return cls(actor, critic1, critic2, actor.copy(), critic1.copy(), critic2.copy(),
                   action_bound)

    def act(self, sz: np.ndarray) -> np.ndarray:
        """Deterministic bounded action(s) for state++latent input(s)."""
        sz = np.asarray(sz, dtype=np.float64)
        if sz.ndim == 1:
            return self.action_bound * nn.mlp_forward(self.actor, sz)
        return self.action_bound * nn.mlp_forward_batch(self.actor, sz)

    def policy(self):
        """Batch policy callable (states_with_latent -> actions) for relabeling/eval."""
        return lambda sz: self.act(sz)


def compute_lambda(q_values: Sequence[float], alpha: float) -> float:
    """alpha / mean |Q|, guarded away from division by zero."""
    q = np.asarray(q_values, dtype=np.float64)
    if q.size == 0:
        raise ConfigError("compute_lambda needs at least one Q value")
    return float(alpha / max(float(np.mean(np.abs(q))), LAMBDA_FLOOR))


@dataclass
class RlBatch:
    """Transitions from one task's dataset plus that task's (detached) latent."""

    sz: np.ndarray       # (B, s+z) states concatenated with the task latent
    a: np.ndarray        # (B, action_dim), raw environment actions
    r: np.ndarray        # (B,)
    sz_next: np.ndarray  # (B, s+z)


class TD3BC:
    """Owns the networks and optimizer state for one training run."""

    def __init__(self, ac: ActorCritic, cfg: TD3Config):
        self.ac = ac
        self.cfg = cfg
        self.opt_actor = nn.adam_init(ac.actor, cfg.lr)
        self.opt_critic1 = nn.adam_init(ac.critic1, cfg.lr)
        self.opt_critic2 = nn.adam_init(ac.critic2, cfg.lr)

    # -- updates ----------------------------------------------------------

    def critic_update(self, batches: Sequence[RlBatch], rng: Rng) -> float:
        """One twin-critic regression step on the pooled per-task batches."""
        ac, cfg = self.ac, self.cfg
        sz = np.concatenate([b.sz for b in batches])
        a_norm = np.concatenate([b.a for b in batches]) / ac.action_bound
        r = np.concatenate([b.r for b in batches])
        sz_next = np.concatenate([b.sz_next for b in batches])

        noise = np.clip(rng.normal(0.0, cfg.policy_noise, a_norm.shape),
                        -cfg.noise_clip, cfg.noise_clip)
        a_next = np.clip(nn.mlp_forward_batch(ac.target_actor, sz_next) + noise, -1.0, 1.0)
        next_in = np.concatenate([sz_next, a_next], axis=1)
        q1_t = nn.mlp_forward_batch(ac.target_critic1, next_in)
        q2_t = nn.mlp_forward_batch(ac.target_critic2, next_in)
        target = r[:, None] + cfg.gamma * np.minimum(q1_t, q2_t)

        x = np.concatenate([sz, a_norm], axis=1)
        total = 0.0
        for critic, opt in ((ac.critic1, self.opt_critic1), (ac.critic2, self.opt_critic2)):
            q, cache = nn.mlp_forward_cached(critic, x)
            diff = q - target
            loss = float(np.mean(diff * diff))
            grads, _ = nn.mlp_backward(critic, cache, 2.0 * diff / diff.shape[0])
            nn.adam_step(opt, critic, grads)
            total += loss
        ac.update_count += 1
        return total

    def actor_update(self, batches: Sequence[RlBatch]) -> tuple[float, list[float]]:
        """Maximize lambda*Q1 - BC on the pooled batches, then sync targets.

        lambda is computed per task batch from that batch's Q1(s, pi(s))
        magnitudes and treated as a constant in the gradient.
        """
        ac, cfg = self.ac, self.cfg
        sz = np.concatenate([b.sz for b in batches])
        a_norm = np.concatenate([b.a for b in batches]) / ac.action_bound
        sizes = [b.sz.shape[0] for b in batches]
        offsets = np.concatenate([[0], np.cumsum(sizes)])
        n_tasks = len(batches)

        a_pi, actor_cache = nn.mlp_forward_cached(ac.actor, sz)
        xc = np.concatenate([sz, a_pi], axis=1)
        q1, critic_cache = nn.mlp_forward_cached(ac.critic1, xc)

        lambdas = [compute_lambda(q1[offsets[t]:offsets[t + 1], 0], cfg.alpha)
                   for t in range(n_tasks)]
        # Rows of task t contribute lambda_t * q / B_t inside a mean over tasks.
        row_lambda = np.repeat(lambdas, sizes)[:, None]
        row_weight = np.repeat([1.0 / b for b in sizes], sizes)[:, None] / n_tasks

        bc = a_pi - a_norm
        loss = float(np.mean([
            -lambdas[t] * float(np.mean(q1[offsets[t]:offsets[t + 1]]))
            + float(np.mean(np.sum(bc[offsets[t]:offsets[t + 1]] ** 2, axis=1)))
            for t in range(n_tasks)
        ]))

        grad_q = -row_lambda * row_weight
        _, grad_xc = nn.mlp_backward(ac.critic1, critic_cache, grad_q)
        grad_a_pi = grad_xc[:, sz.shape[1]:] + 2.0 * bc * row_weight
        actor_grads, _ = nn.mlp_backward(ac.actor, actor_cache, grad_a_pi)
        nn.adam_step(self.opt_actor, ac.actor, actor_grads)

        soft_update(ac.target_actor, ac.actor, cfg.tau)
        soft_update(ac.target_critic1, ac.critic1, cfg.tau)
        soft_update(ac.target_critic2, ac.critic2, cfg.tau)
        return loss, lambdas


def soft_update(target: nn.Mlp, online: nn.Mlp, tau: float) -> None:
    """target <- (1 - tau) * target + tau * online, exact per parameter."""
    for lt, lo in zip(target.layers, online.layers):
        lt.w *= 1.0 - tau
        lt.w += tau * lo.w
        lt.b *= 1.0 - tau
        lt.b += tau * lo.b
