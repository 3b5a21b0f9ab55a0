"""Task auto-encoder: set encoder over labeled probing pairs + conditional decoder.

The encoder runs a feature net over each (x, y) pair, average-pools the
per-pair embeddings, and squashes componentwise with tanh so every
latent lands strictly inside (-1, 1); an empty context encodes to the
all-zeros prior. The decoder maps (x, z) back to a label prediction.
Training minimizes the mean squared reconstruction error of the labels,
with gradients flowing through both nets -- the backward pass here is
analytic and is verified against finite differences in the tests.

`contrastive_loss` implements the metric-learning objective used by the
contrastive ablation: pull same-task embeddings together, push
different-task embeddings apart via an inverse-square term.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import nn
from .errors import ConfigError
from .rng import Rng


@dataclass
class ContextBatch:
    """n labeled probing pairs from a single task: x = (s, a), y = (s', r) or (r)."""

    x: np.ndarray
    y: np.ndarray

    def __post_init__(self):
        self.x = np.atleast_2d(np.asarray(self.x, dtype=np.float64))
        self.y = np.atleast_2d(np.asarray(self.y, dtype=np.float64))
        if self.x.shape[0] != self.y.shape[0]:
            raise ConfigError(f"context x/y row mismatch: {self.x.shape} vs {self.y.shape}")

    @property
    def n(self) -> int:
        return self.x.shape[0]


@dataclass
class TaePair:
    feature_net: nn.Mlp  # (x, y) -> R^m
    decoder: nn.Mlp      # (x, z) -> y_hat
    latent_dim: int

    def copy(self) -> "TaePair":
        return TaePair(self.feature_net.copy(), self.decoder.copy(), self.latent_dim)


def tae_init(x_dim: int, y_dim: int, latent_dim: int, rng: Rng,
             width: int = 64, hidden_layers: int = 3) -> TaePair:
    feat_dims = [x_dim + y_dim] + [width] * hidden_layers + [latent_dim]
    dec_dims = [x_dim + latent_dim] + [width] * hidden_layers + [y_dim]
    feature_net = nn.mlp_init(feat_dims, rng.split("feature"))
    decoder = nn.mlp_init(dec_dims, rng.split("decoder"))
    return TaePair(feature_net, decoder, latent_dim)


_ONE_INSIDE = float(np.nextafter(1.0, 0.0))


def _pooled_mean(feats: np.ndarray) -> np.ndarray:
    # Column-wise sorted summation: float addition is order-sensitive, so
    # summing each column's multiset in sorted order makes the pooled mean
    # bit-identical under any permutation of the pairs.
    return np.sort(feats, axis=0).sum(axis=0) / feats.shape[0]


def _squash(pooled: np.ndarray) -> np.ndarray:
    # tanh rounds to exactly +-1.0 for |x| >~ 19; keep the latent strictly
    # interior to (-1, 1) by clamping to the nearest representable value.
    return np.clip(np.tanh(pooled), -_ONE_INSIDE, _ONE_INSIDE)


def encode(pair: TaePair, ctx: ContextBatch) -> np.ndarray:
    """z = tanh(mean_k feature(x_k, y_k)); the empty context gives the zero prior."""
    if ctx.n == 0:
        return np.zeros(pair.latent_dim)
    feats = nn.mlp_forward_batch(pair.feature_net, np.concatenate([ctx.x, ctx.y], axis=1))
    return _squash(_pooled_mean(feats))


def encode_many(pair: TaePair, contexts: Sequence[ContextBatch]) -> np.ndarray:
    """Encode several contexts in one batched pass; returns (len(contexts), m)."""
    if len(contexts) == 0:
        return np.zeros((0, pair.latent_dim))
    zs = np.zeros((len(contexts), pair.latent_dim))
    nonempty = [i for i, c in enumerate(contexts) if c.n > 0]
    if not nonempty:
        return zs
    rows = np.concatenate([np.concatenate([contexts[i].x, contexts[i].y], axis=1)
                           for i in nonempty])
    feats = nn.mlp_forward_batch(pair.feature_net, rows)
    offset = 0
    for i in nonempty:
        n = contexts[i].n
        zs[i] = _squash(_pooled_mean(feats[offset:offset + n]))
        offset += n
    return zs


def decode(pair: TaePair, z: np.ndarray, x: np.ndarray) -> np.ndarray:
    """Deterministic label prediction for probing input(s) x under latent z."""
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    xb = np.atleast_2d(x)
    zb = np.broadcast_to(np.asarray(z, dtype=np.float64), (xb.shape[0], pair.latent_dim))
    out = nn.mlp_forward_batch(pair.decoder, np.concatenate([xb, zb], axis=1))
    return out[0] if single else out


def tae_loss(pair: TaePair, ctx: ContextBatch) -> float:
    """(1/n) sum_k ||y_k - decode(encode(ctx), x_k)||^2 over the context."""
    if ctx.n < 1:
        raise ConfigError("tae_loss needs a non-empty context")
    z = encode(pair, ctx)
    y_hat = decode(pair, z, ctx.x)
    residual = y_hat - ctx.y
    return float(np.mean(np.sum(residual * residual, axis=1)))


def tae_loss_and_grads(pair: TaePair, contexts: Sequence[ContextBatch]):
    """Mean reconstruction loss over per-task contexts, with analytic gradients.

    Returns (loss, feature_grads, decoder_grads); the loss is the mean of
    the per-context `tae_loss` values and the gradients are of exactly
    that quantity, flowing through encoder pooling, tanh squash, and the
    decoder. All contexts are pushed through each net in one batch.
    """
    if len(contexts) == 0:
        raise ConfigError("need at least one context")
    lengths = np.array([c.n for c in contexts])
    if np.any(lengths < 1):
        raise ConfigError("tae_loss needs non-empty contexts")
    n_tasks = len(contexts)
    offsets = np.concatenate([[0], np.cumsum(lengths)])
    x_all = np.concatenate([c.x for c in contexts])
    y_all = np.concatenate([c.y for c in contexts])

    feat_in = np.concatenate([x_all, y_all], axis=1)
    feats, feat_cache = nn.mlp_forward_cached(pair.feature_net, feat_in)

    pooled = np.stack([_pooled_mean(feats[offsets[i]:offsets[i + 1]])
                       for i in range(n_tasks)])
    z = _squash(pooled)
    z_rows = np.repeat(z, lengths, axis=0)

    dec_in = np.concatenate([x_all, z_rows], axis=1)
    y_hat, dec_cache = nn.mlp_forward_cached(pair.decoder, dec_in)

    residual = y_hat - y_all
    per_row_sq = np.sum(residual * residual, axis=1)
    per_task = np.add.reduceat(per_row_sq, offsets[:-1]) / lengths
    loss = float(per_task.mean())

    # d loss / d y_hat: rows of task i carry 2 r / (n_i * N)
    row_scale = np.repeat(1.0 / (lengths * n_tasks), lengths)[:, None]
    grad_yhat = 2.0 * residual * row_scale
    dec_grads, grad_dec_in = nn.mlp_backward(pair.decoder, dec_cache, grad_yhat)

    grad_z_rows = grad_dec_in[:, x_all.shape[1]:]
    grad_z = np.add.reduceat(grad_z_rows, offsets[:-1], axis=0)
    grad_pooled = grad_z * (1.0 - z * z)
    grad_feats = np.repeat(grad_pooled / lengths[:, None], lengths, axis=0)
    feat_grads, _ = nn.mlp_backward(pair.feature_net, feat_cache, grad_feats)

    return loss, feat_grads, dec_grads


def contrastive_loss(pair: TaePair, task_contexts: Sequence[Sequence[ContextBatch]],
                     eps: float = 1e-3) -> float:
    loss, _ = _contrastive(pair, task_contexts, eps, want_grads=False)
    return loss


def contrastive_loss_and_grads(pair: TaePair, task_contexts: Sequence[Sequence[ContextBatch]],
                               eps: float = 1e-3):
    """Contrastive objective and its gradient w.r.t. the feature net only."""
    return _contrastive(pair, task_contexts, eps, want_grads=True)


def _contrastive(pair, task_contexts, eps, want_grads):
    if len(task_contexts) < 2:
        raise ConfigError("contrastive loss needs contexts from at least 2 tasks")
    for contexts in task_contexts:
        if len(contexts) < 2:
            raise ConfigError("contrastive loss needs >= 2 contexts per task")
        for c in contexts:
            if c.n < 1:
                raise ConfigError("contrastive loss needs non-empty contexts")

    flat = [c for contexts in task_contexts for c in contexts]
    labels = np.concatenate([[t] * len(contexts) for t, contexts in enumerate(task_contexts)])
    lengths = np.array([c.n for c in flat])
    offsets = np.concatenate([[0], np.cumsum(lengths)])
    rows = np.concatenate([np.concatenate([c.x, c.y], axis=1) for c in flat])

    feats, cache = nn.mlp_forward_cached(pair.feature_net, rows)
    pooled = np.stack([_pooled_mean(feats[offsets[i]:offsets[i + 1]])
                       for i in range(len(flat))])
    z = _squash(pooled)

    n = z.shape[0]
    same_pairs = [(i, j) for i in range(n) for j in range(i + 1, n) if labels[i] == labels[j]]
    diff_pairs = [(i, j) for i in range(n) for j in range(i + 1, n) if labels[i] != labels[j]]

    grad_z = np.zeros_like(z)
    same_total = 0.0
    for i, j in same_pairs:
        d = z[i] - z[j]
        same_total += float(d @ d)
        if want_grads:
            g = 2.0 * d / len(same_pairs)
            grad_z[i] += g
            grad_z[j] -= g
    diff_total = 0.0
    for i, j in diff_pairs:
        d = z[i] - z[j]
        sq = float(d @ d) + eps
        diff_total += 1.0 / sq
        if want_grads:
            g = -2.0 * d / (sq * sq) / len(diff_pairs)
            grad_z[i] += g
            grad_z[j] -= g

    loss = same_total / len(same_pairs) + diff_total / len(diff_pairs)
    if not want_grads:
        return loss, None

    grad_pooled = grad_z * (1.0 - z * z)
    grad_feats = np.repeat(grad_pooled / lengths[:, None], lengths, axis=0)
    feat_grads, _ = nn.mlp_backward(pair.feature_net, cache, grad_feats)
    return loss, feat_grads


# ---------------------------------------------------------------------------
# Snapshot IO

def save_tae(pair: TaePair, encoder_path, decoder_path) -> None:
    nn.save_mlp(encoder_path, pair.feature_net)
    nn.save_mlp(decoder_path, pair.decoder)


def load_tae(encoder_path, decoder_path) -> TaePair:
    feature_net = nn.load_mlp(encoder_path)
    decoder = nn.load_mlp(decoder_path)
    return TaePair(feature_net, decoder, latent_dim=feature_net.out_dim)
