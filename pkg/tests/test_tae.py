import numpy as np
import pytest

from gentle import nn
from gentle.errors import ConfigError
from gentle.rng import Rng
from gentle.tae import (ContextBatch, TaePair, contrastive_loss,
                        contrastive_loss_and_grads, decode, encode, encode_many,
                        load_tae, save_tae, tae_init, tae_loss, tae_loss_and_grads)


def small_pair(x_dim=3, y_dim=2, m=4, seed=0, width=6):
    return tae_init(x_dim, y_dim, m, Rng(seed).split("tae"), width=width, hidden_layers=2)


def random_ctx(n, x_dim=3, y_dim=2, seed=0):
    rng = Rng(seed)
    return ContextBatch(rng.split("x").standard_normal((n, x_dim)),
                        rng.split("y").standard_normal((n, y_dim)))


def jitter(pair, seed=0):
    rng = Rng(seed).split("jit")
    for net in (pair.feature_net, pair.decoder):
        for layer in net.layers:
            layer.b += rng.normal(0.0, 0.05, layer.b.shape)


# -- encode ------------------------------------------------------------------

def test_encode_permutation_invariant_exactly():
    pair = small_pair()
    rng = Rng(1)
    for trial in range(100):
        ctx = random_ctx(17, seed=trial + 10)
        z = encode(pair, ctx)
        for _ in range(10):
            perm = rng.permutation(ctx.n)
            z_perm = encode(pair, ContextBatch(ctx.x[perm], ctx.y[perm]))
            assert np.array_equal(z, z_perm)


def test_encode_single_pair_is_squashed_feature():
    pair = small_pair()
    ctx = random_ctx(1, seed=3)
    feats = nn.mlp_forward(pair.feature_net, np.concatenate([ctx.x[0], ctx.y[0]]))
    assert np.allclose(encode(pair, ctx), np.tanh(feats), atol=1e-15)


def test_encode_empty_context_gives_zero_prior():
    pair = tae_init(4, 1, 5, Rng(2), width=8, hidden_layers=2)
    z = encode(pair, ContextBatch(np.zeros((0, 4)), np.zeros((0, 1))))
    assert z.shape == (5,)
    assert np.array_equal(z, np.zeros(5))


def test_encode_components_strictly_inside_unit_interval():
    pair = small_pair()
    for layer in pair.feature_net.layers:
        layer.w *= 50.0  # drive the pooled features far out
    z = encode(pair, random_ctx(8, seed=4))
    assert np.all(np.abs(z) < 1.0)


def test_encode_many_matches_individual():
    pair = small_pair()
    ctxs = [random_ctx(n, seed=n) for n in (1, 5, 12)]
    stacked = encode_many(pair, ctxs)
    for i, ctx in enumerate(ctxs):
        assert np.allclose(stacked[i], encode(pair, ctx), atol=1e-15)


def test_context_shape_mismatch_rejected():
    with pytest.raises(ConfigError):
        ContextBatch(np.zeros((3, 2)), np.zeros((4, 1)))


# -- decode ------------------------------------------------------------------

def test_decode_deterministic():
    pair = small_pair()
    z = encode(pair, random_ctx(6, seed=5))
    x = Rng(6).standard_normal(3)
    assert np.array_equal(decode(pair, z, x), decode(pair, z, x))


def test_decode_output_dim_one_for_reward_only():
    pair = tae_init(4, 1, 5, Rng(7), width=8, hidden_layers=2)
    out = decode(pair, np.zeros(5), np.zeros(4))
    assert out.shape == (1,)


def test_trained_tae_reconstructs_toy_task():
    # One synthetic task: y = quadratic of x. After training, the mean
    # squared error must fall below 10% of the label variance.
    rng = Rng(8)
    x = rng.split("x").uniform(-1, 1, (256, 2))
    y = (x[:, :1] ** 2 + 0.5 * x[:, 1:]) * 2.0
    ctx = ContextBatch(x, y)
    pair = tae_init(2, 1, 3, rng.split("init"), width=32, hidden_layers=2)
    opt_f = nn.adam_init(pair.feature_net, 3e-4)
    opt_d = nn.adam_init(pair.decoder, 3e-4)
    for _ in range(800):
        _, fg, dg = tae_loss_and_grads(pair, [ctx])
        nn.adam_step(opt_f, pair.feature_net, fg)
        nn.adam_step(opt_d, pair.decoder, dg)
    final = tae_loss(pair, ctx)
    assert final < 0.1 * float(np.var(y))


# -- loss --------------------------------------------------------------------

def test_loss_zero_for_perfect_decoder():
    # Zero-weight decoder with bias equal to the constant label.
    pair = small_pair(y_dim=1)
    for layer in pair.decoder.layers:
        layer.w[...] = 0.0
        layer.b[...] = 0.0
    pair.decoder.layers[-1].b[...] = 0.7
    ctx = ContextBatch(Rng(9).standard_normal((5, 3)), np.full((5, 1), 0.7))
    assert tae_loss(pair, ctx) == 0.0


def test_loss_matches_stated_residual_example():
    # n=2 with residual vectors (1,0) and (0,2) -> loss (1+4)/2 = 2.5.
    pair = small_pair(y_dim=2)
    for layer in pair.decoder.layers:
        layer.w[...] = 0.0
        layer.b[...] = 0.0
    ctx = ContextBatch(np.zeros((2, 3)), np.array([[-1.0, 0.0], [0.0, -2.0]]))
    assert tae_loss(pair, ctx) == 2.5


def test_loss_equals_brute_force_recomputation():
    pair = small_pair()
    ctx = random_ctx(9, seed=10)
    z = encode(pair, ctx)
    total = 0.0
    for k in range(ctx.n):
        y_hat = decode(pair, z, ctx.x[k])
        total += float(np.sum((ctx.y[k] - y_hat) ** 2))
    assert abs(tae_loss(pair, ctx) - total / ctx.n) < 1e-12


def test_loss_rejects_empty_context():
    pair = small_pair()
    with pytest.raises(ConfigError):
        tae_loss(pair, ContextBatch(np.zeros((0, 3)), np.zeros((0, 2))))


def test_loss_and_grads_mean_over_tasks():
    pair = small_pair()
    ctxs = [random_ctx(5, seed=s) for s in (20, 21, 22)]
    loss, _, _ = tae_loss_and_grads(pair, ctxs)
    assert abs(loss - np.mean([tae_loss(pair, c) for c in ctxs])) < 1e-12


def test_gradients_flow_through_encoder_and_decoder():
    pair = small_pair()
    jitter(pair, seed=30)
    ctxs = [random_ctx(4, seed=s) for s in (11, 12)]
    _, fg, dg = tae_loss_and_grads(pair, ctxs)
    assert any(np.any(dw != 0) for dw, _ in fg)
    assert any(np.any(dw != 0) for dw, _ in dg)

    flat0 = np.concatenate([nn.flatten_params(pair.feature_net),
                            nn.flatten_params(pair.decoder)])
    n_feat = nn.flatten_params(pair.feature_net).size
    probe = pair.copy()

    def f(flat):
        nn.set_flat_params(probe.feature_net, flat[:n_feat])
        nn.set_flat_params(probe.decoder, flat[n_feat:])
        return float(np.mean([tae_loss(probe, c) for c in ctxs]))

    numeric = nn.finite_difference_gradient(f, flat0)
    analytic = np.concatenate([nn.flatten_grads(fg), nn.flatten_grads(dg)])
    assert nn.max_relative_error(analytic, numeric) < 1e-4


def test_unequal_context_sizes_supported():
    pair = small_pair()
    ctxs = [random_ctx(3, seed=40), random_ctx(11, seed=41)]
    loss, _, _ = tae_loss_and_grads(pair, ctxs)
    assert abs(loss - np.mean([tae_loss(pair, c) for c in ctxs])) < 1e-12


# -- contrastive variant -------------------------------------------------------

def two_task_contexts(seed=50, n_ctx=2, n=4):
    return [[random_ctx(n, seed=seed + 10 * t + c) for c in range(n_ctx)]
            for t in range(2)]


def test_contrastive_same_task_term_zero_when_identical():
    pair = small_pair()
    ctx = random_ctx(4, seed=60)
    other = [random_ctx(4, seed=61), random_ctx(4, seed=62)]
    loss = contrastive_loss(pair, [[ctx, ctx], other])
    z = encode(pair, ctx)
    zo = [encode(pair, c) for c in other]
    same_term = float(np.sum((zo[0] - zo[1]) ** 2)) / 2  # the [ctx, ctx] pair adds 0
    cross = [1.0 / (float(np.sum((z - zz) ** 2)) + 1e-3) for zz in zo] * 2
    expected = same_term + np.mean(cross)
    assert abs(loss - expected) < 1e-12


def test_contrastive_far_apart_embeddings_vanishing_repulsion():
    pair = small_pair(m=2)
    z_dist_sq = 1e6
    # direct formula check on the repulsion term shape
    assert 1.0 / (z_dist_sq + 1e-3) < 2e-6


def test_contrastive_symmetric_under_task_swap():
    pair = small_pair()
    contexts = two_task_contexts()
    a = contrastive_loss(pair, contexts)
    b = contrastive_loss(pair, contexts[::-1])
    assert abs(a - b) < 1e-12


def test_contrastive_needs_two_tasks_and_two_contexts():
    pair = small_pair()
    with pytest.raises(ConfigError):
        contrastive_loss(pair, [[random_ctx(3), random_ctx(3)]])
    with pytest.raises(ConfigError):
        contrastive_loss(pair, [[random_ctx(3)], [random_ctx(3), random_ctx(3)]])


def test_contrastive_gradient_matches_finite_differences():
    pair = small_pair()
    jitter(pair, seed=70)
    contexts = two_task_contexts(seed=70)
    _, fg = contrastive_loss_and_grads(pair, contexts)
    flat0 = nn.flatten_params(pair.feature_net)
    probe = pair.copy()

    def f(flat):
        nn.set_flat_params(probe.feature_net, flat)
        return contrastive_loss(probe, contexts)

    numeric = nn.finite_difference_gradient(f, flat0)
    assert nn.max_relative_error(nn.flatten_grads(fg), numeric) < 1e-4


def test_tae_snapshot_round_trip(tmp_path):
    pair = small_pair()
    save_tae(pair, tmp_path / "enc.bin", tmp_path / "dec.bin")
    loaded = load_tae(tmp_path / "enc.bin", tmp_path / "dec.bin")
    ctx = random_ctx(5, seed=80)
    assert np.array_equal(encode(pair, ctx), encode(loaded, ctx))
    assert loaded.latent_dim == pair.latent_dim
