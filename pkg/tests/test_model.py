"""Scorer internals: shapes, masking, normalization, gradients, training."""

import numpy as np
import pytest

from latte.model import (
    INIT_SCALE,
    LATENT_INIT_SCALE,
    ScorerConfig,
    ScorerParams,
    TrainExample,
    batch_marginal_nll,
    encode_user,
    expected_shapes,
    flatten_history,
    init_params,
    item_log_prob,
    load_params,
    loss_and_gradients,
    masked_distribution,
    masked_log_probs,
    sample_latent,
    save_params,
    step_logits,
    train,
)
from latte.trie import DecodingTrie, all_position_permutations, build_forest

from conftest import rand_params


SMALL = ScorerConfig(m=3, M=2, latent_count=0, d=4, hidden=5, gamma=0.8, seed=0)
SMALL_LAT = ScorerConfig(m=3, M=2, latent_count=2, d=4, hidden=5, gamma=0.8, seed=0)


# ---------------------------------------------------------------------------
# construction

def test_config_validation():
    with pytest.raises(ValueError):
        ScorerConfig(m=0, M=4)
    with pytest.raises(ValueError):
        ScorerConfig(m=2, M=1)
    with pytest.raises(ValueError):
        ScorerConfig(m=2, M=4, gamma=0.0)
    with pytest.raises(ValueError):
        ScorerConfig(m=2, M=4, latent_count=-1)


def test_init_params_shapes_and_determinism():
    a = init_params(SMALL_LAT)
    b = init_params(SMALL_LAT)
    for name, shape in expected_shapes(SMALL_LAT).items():
        assert getattr(a, name).shape == shape
        np.testing.assert_array_equal(getattr(a, name), getattr(b, name))
    assert np.abs(a.emb).max() <= INIT_SCALE
    assert np.all(a.b1 == 0.0)


def test_latent_embeddings_start_orthonormal():
    """Latent offsets are orthogonal rows of norm LATENT_INIT_SCALE when L <= d."""
    cfg = ScorerConfig(m=3, M=8, latent_count=4, d=16, hidden=8, seed=0)
    params = init_params(cfg)
    gram = params.lat_emb @ params.lat_emb.T
    np.testing.assert_allclose(gram, LATENT_INIT_SCALE**2 * np.eye(4), atol=1e-10)


def test_latent_embeddings_fall_back_when_wide():
    cfg = ScorerConfig(m=2, M=4, latent_count=6, d=4, hidden=4, seed=0)
    params = init_params(cfg)
    assert params.lat_emb.shape == (6, 4)
    assert np.abs(params.lat_emb).max() <= LATENT_INIT_SCALE


# ---------------------------------------------------------------------------
# history encoding

def test_flatten_history(tiny_catalog):
    tokens = flatten_history(tiny_catalog, ["a0", "b3"])
    np.testing.assert_array_equal(tokens, [0, 0, 0, 1, 1, 1])
    with pytest.raises(ValueError):
        flatten_history(tiny_catalog, [])


def test_encode_user_recency_weights():
    """Hand-check: two tokens, weights gamma^1 and gamma^0 normalized."""
    params = rand_params(SMALL, seed=1)
    g = SMALL.gamma
    h = encode_user(params, [1, 0])
    w1 = g / (g + 1.0)
    w2 = 1.0 / (g + 1.0)
    expected = w1 * params.emb[0, 1] + w2 * params.emb[1, 0]
    np.testing.assert_allclose(h, expected, atol=1e-12)


def test_encode_user_position_cycling():
    # token index beyond m cycles back to position 0
    params = rand_params(SMALL, seed=2)
    h = encode_user(params, [0, 0, 0, 1])  # 4th token sits at position 0 again
    T = 4
    g = SMALL.gamma
    w = g ** np.arange(T - 1, -1.0, -1.0)
    w /= w.sum()
    expected = (
        w[0] * params.emb[0, 0] + w[1] * params.emb[1, 0]
        + w[2] * params.emb[2, 0] + w[3] * params.emb[0, 1]
    )
    np.testing.assert_allclose(h, expected, atol=1e-12)


def test_encode_user_rejects_bad_tokens():
    params = rand_params(SMALL)
    with pytest.raises(ValueError):
        encode_user(params, [])
    with pytest.raises(ValueError):
        encode_user(params, [5])


# ---------------------------------------------------------------------------
# masking

def test_masked_distribution_sums_to_one():
    logits = np.array([2.0, -1.0, 0.5, 3.0])
    dist = masked_distribution(logits, (0, 2))
    assert dist[1] == 0.0 and dist[3] == 0.0
    np.testing.assert_allclose(dist.sum(), 1.0, atol=1e-12)
    # restricted softmax ratio is preserved
    np.testing.assert_allclose(dist[0] / dist[2], np.exp(2.0 - 0.5), atol=1e-12)


def test_masked_log_probs_minus_inf_off_mask():
    logs = masked_log_probs(np.zeros(3), (1,))
    assert logs[1] == 0.0
    assert logs[0] == -np.inf and logs[2] == -np.inf


def test_step_logits_validation(tiny_trie):
    params = rand_params(SMALL_LAT)
    h = np.zeros(SMALL_LAT.d)
    with pytest.raises(ValueError):
        step_logits(params, h, (), 5)
    with pytest.raises(ValueError):
        step_logits(params, h, (0,), 0)  # latent step takes empty prefix
    with pytest.raises(ValueError):
        step_logits(params, h, (), 1)  # SID step needs a latent
    out = step_logits(params, h, (), 0)
    assert out.shape == (2,)  # latent vocabulary


# ---------------------------------------------------------------------------
# normalization (probabilities over the catalog)

def test_base_model_normalizes(tiny_trie):
    params = rand_params(SMALL, seed=7)
    history = [0, 1, 0]
    total = sum(
        np.exp(item_log_prob(params, tiny_trie, history, item)) for item in tiny_trie.item_ids
    )
    np.testing.assert_allclose(total, 1.0, atol=1e-9)


def test_latte_sum_normalizes(tiny_trie):
    params = rand_params(SMALL_LAT, seed=8)
    history = [1, 1, 0]
    total = sum(
        np.exp(item_log_prob(params, tiny_trie, history, item, agg="sum"))
        for item in tiny_trie.item_ids
    )
    np.testing.assert_allclose(total, 1.0, atol=1e-9)


def test_latte_max_underestimates_sum(tiny_trie):
    params = rand_params(SMALL_LAT, seed=9)
    history = [0, 0, 1]
    for item in tiny_trie.item_ids:
        mx = item_log_prob(params, tiny_trie, history, item, agg="max")
        sm = item_log_prob(params, tiny_trie, history, item, agg="sum")
        assert mx <= sm + 1e-12


def test_fixed_latent_matches_joint_term(tiny_trie):
    params = rand_params(SMALL_LAT, seed=10)
    history = [0, 1]
    per_latent = [
        item_log_prob(params, tiny_trie, history, "a0", latent=lat)
        for lat in range(SMALL_LAT.latent_count)
    ]
    joint = item_log_prob(params, tiny_trie, history, "a0", agg="sum")
    np.testing.assert_allclose(np.logaddexp.reduce(per_latent), joint, atol=1e-12)


# ---------------------------------------------------------------------------
# gradients

def _finite_difference_check(cfg: ScorerConfig, struct, examples, eps=1e-5, tol=1e-4):
    params = rand_params(cfg, seed=3)
    for ex in examples:
        if cfg.latent_count > 0 and ex.latent is None:
            raise AssertionError("latent examples must carry a latent token")
    loss, grads = loss_and_gradients(params, examples, struct)
    worst = 0.0
    for name, arr in params.arrays().items():
        g = grads[name]
        assert g.shape == arr.shape
        flat = arr.ravel()
        for idx in range(flat.size):
            orig = flat[idx]
            flat[idx] = orig + eps
            up, _ = loss_and_gradients(params, examples, struct)
            flat[idx] = orig - eps
            dn, _ = loss_and_gradients(params, examples, struct)
            flat[idx] = orig
            numeric = (up - dn) / (2 * eps)
            denom = max(abs(numeric), abs(g.ravel()[idx]), 1e-8)
            worst = max(worst, abs(numeric - g.ravel()[idx]) / denom)
    assert worst < tol, f"max relative gradient error {worst}"
    return worst


def test_gradients_match_finite_differences_base(tiny_trie):
    examples = [
        TrainExample(history=np.array([0, 1, 1]), target_item="a1", target_sid=(0, 0, 1)),
        TrainExample(history=np.array([1, 0]), target_item="b2", target_sid=(1, 1, 0)),
    ]
    _finite_difference_check(SMALL, tiny_trie, examples)


def test_gradients_match_finite_differences_latent(tiny_trie, tiny_catalog):
    forest = build_forest(tiny_catalog, all_position_permutations(3)[:2])
    examples = [
        TrainExample(history=np.array([0, 1]), target_item="a2", target_sid=(0, 1, 0), latent=0),
        TrainExample(history=np.array([1, 1, 0]), target_item="b0", target_sid=(1, 0, 0), latent=1),
    ]
    _finite_difference_check(SMALL_LAT, forest, examples)


def test_loss_rejects_empty_batch(tiny_trie):
    with pytest.raises(ValueError):
        loss_and_gradients(rand_params(SMALL), [], tiny_trie)


# ---------------------------------------------------------------------------
# latent sampling and training

def test_sample_latent_uniform_range():
    rng = np.random.default_rng(0)
    draws = [sample_latent(rng, 4) for _ in range(2000)]
    assert set(draws) == {0, 1, 2, 3}
    counts = np.bincount(draws) / len(draws)
    np.testing.assert_allclose(counts, 0.25, atol=0.05)


def test_train_improves_and_is_deterministic(tiny_trie, tiny_catalog):
    rng = np.random.default_rng(4)
    examples = []
    for _ in range(60):
        item = tiny_trie.item_ids[rng.integers(8)]
        hist = rng.integers(0, 2, size=6)
        examples.append(
            TrainExample(history=hist, target_item=item, target_sid=tiny_trie.sid_of(item))
        )
    tr, va = examples[:48], examples[48:]
    start = init_params(SMALL)
    out1, curve1 = train(start, tr, va, tiny_trie, epochs=5, lr=1e-2, batch_size=16, seed=0)
    out2, curve2 = train(start, tr, va, tiny_trie, epochs=5, lr=1e-2, batch_size=16, seed=0)
    assert curve1 == curve2
    for name in out1.ARRAY_FIELDS:
        np.testing.assert_array_equal(getattr(out1, name), getattr(out2, name))
    assert curve1[-1][1] < curve1[0][1]  # train loss fell
    # the input parameters must not have been mutated
    np.testing.assert_array_equal(start.emb, init_params(SMALL).emb)


def test_train_returns_best_validation_params(tiny_trie):
    rng = np.random.default_rng(5)
    examples = []
    for _ in range(40):
        item = tiny_trie.item_ids[rng.integers(8)]
        hist = rng.integers(0, 2, size=4)
        examples.append(
            TrainExample(history=hist, target_item=item, target_sid=tiny_trie.sid_of(item))
        )
    tr, va = examples[:32], examples[32:]
    params, curve = train(
        init_params(SMALL), tr, va, tiny_trie, epochs=8, lr=5e-2, batch_size=8, seed=1
    )
    best_epoch_loss = min(v for _, _, v in curve)
    final = batch_marginal_nll(params, va, tiny_trie)
    np.testing.assert_allclose(final, best_epoch_loss, atol=1e-9)


def test_train_resets_latents_for_base_config(tiny_trie):
    """Base-model training must ignore stale latent fields on the examples."""
    examples = [
        TrainExample(history=np.array([0, 1]), target_item="a0", target_sid=(0, 0, 0), latent=3),
        TrainExample(history=np.array([1, 0]), target_item="b1", target_sid=(1, 0, 1), latent=2),
    ]
    params, _ = train(
        init_params(SMALL), examples, examples, tiny_trie, epochs=1, lr=1e-2, batch_size=2, seed=0
    )
    assert all(ex.latent is None for ex in examples)


# ---------------------------------------------------------------------------
# persistence

def test_params_roundtrip(tmp_path):
    params = init_params(SMALL_LAT)
    path = tmp_path / "params.json"
    save_params(params, path)
    loaded = load_params(path)
    assert loaded.config == params.config
    for name in params.ARRAY_FIELDS:
        np.testing.assert_array_equal(getattr(loaded, name), getattr(params, name))
