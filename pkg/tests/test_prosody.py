import numpy as np
import pytest

from convctx.errors import TrainingError
from convctx.prosody import (
    ApmConfig,
    ApmParams,
    build_dataset,
    eval_apm,
    grad_check_apm,
    init_apm,
    predict_lpv,
    predict_lpv_detailed,
    train_apm,
)
from convctx.training import init_encoder_pair

CTX = 12
ATTN = 5


def random_params(seed=0):
    return init_apm(seed, ctx_dim=CTX, attn_dim=ATTN)


def test_single_history_entry_gets_full_weight():
    rng = np.random.default_rng(0)
    params = random_params(1)
    _, weights = predict_lpv_detailed(rng.normal(size=CTX), rng.normal(size=(1, 6)), params)
    assert weights.shape == (1,)
    assert weights[0] == 1.0


def test_repeated_history_is_convex():
    rng = np.random.default_rng(1)
    params = random_params(2)
    ctx = rng.normal(size=CTX)
    lpv = rng.normal(size=6)
    single = predict_lpv(ctx, lpv[None, :], params)
    repeated = predict_lpv(ctx, np.tile(lpv, (4, 1)), params)
    assert np.allclose(single, repeated, atol=1e-12)


def test_zero_params_predict_bias():
    params = random_params(3)
    for arr in (params.wq, params.wk, params.wv, params.w_out):
        arr[:] = 0.0
    params.b_out[:] = np.array([1.0, -2.0, 0.5, 0.0, 3.0, 0.25])
    rng = np.random.default_rng(2)
    pred = predict_lpv(rng.normal(size=CTX), rng.normal(size=(3, 6)), params)
    assert np.array_equal(pred, params.b_out)


def test_attention_weights_are_distribution():
    rng = np.random.default_rng(3)
    params = random_params(4)
    params.wq[:] = rng.normal(size=params.wq.shape)  # zero-init otherwise
    for _ in range(25):
        i = int(rng.integers(1, 7))
        _, weights = predict_lpv_detailed(rng.normal(size=CTX), rng.normal(size=(i, 6)), params)
        assert np.all(weights >= 0)
        assert abs(weights.sum() - 1.0) < 1e-12


def test_query_starts_at_zero_so_attention_is_uniform():
    params = random_params(5)
    assert np.all(params.wq == 0)
    rng = np.random.default_rng(4)
    _, weights = predict_lpv_detailed(rng.normal(size=CTX), rng.normal(size=(4, 6)), params)
    assert np.allclose(weights, 0.25, atol=1e-15)


def test_empty_history_rejected():
    params = random_params(6)
    with pytest.raises(TrainingError, match="non-empty history"):
        predict_lpv(np.zeros(CTX), np.zeros((0, 6)), params)


def test_dim_mismatch_rejected():
    params = random_params(7)
    with pytest.raises(TrainingError, match="ctx_dim"):
        predict_lpv(np.zeros(CTX + 1), np.zeros((2, 6)), params)
    with pytest.raises(TrainingError, match="prosody dim"):
        predict_lpv(np.zeros(CTX), np.zeros((2, 5)), params)


@pytest.fixture(scope="module")
def apm_setup(small_setup):
    corpus, features, _, _ = small_setup
    params_text, params_audio = init_encoder_pair(3, features.hash_dim)
    return corpus, features, params_text, params_audio


def test_grad_check_apm(apm_setup):
    corpus, features, params_text, params_audio = apm_setup
    cfg = ApmConfig(batch_size=6, attn_dim=8)
    result = grad_check_apm(corpus, features, params_text, params_audio, cfg, seed=9, eps=1e-4)
    assert result.max_rel_error < 1e-4


def test_grad_check_apm_bad_epsilon(apm_setup):
    corpus, features, params_text, params_audio = apm_setup
    with pytest.raises(TrainingError, match="invalid epsilon"):
        grad_check_apm(corpus, features, params_text, params_audio, ApmConfig(), seed=1, eps=-1.0)


def test_train_apm_zero_lr_keeps_params(apm_setup):
    corpus, features, params_text, params_audio = apm_setup
    cfg = ApmConfig(steps=8, learning_rate=0.0, weight_decay=0.0, batch_size=4)
    apm, _ = train_apm(corpus, features, params_text, params_audio, cfg, seed=11)
    fresh = init_apm(np.random.SeedSequence((11, 5)), apm.ctx_dim, cfg.attn_dim)
    assert np.array_equal(apm.pack(), fresh.pack())


def test_train_apm_deterministic(apm_setup):
    corpus, features, params_text, params_audio = apm_setup
    cfg = ApmConfig(steps=40, batch_size=8)
    apm_a, rep_a = train_apm(corpus, features, params_text, params_audio, cfg, seed=13)
    apm_b, rep_b = train_apm(corpus, features, params_text, params_audio, cfg, seed=13)
    assert np.array_equal(apm_a.pack(), apm_b.pack())
    assert rep_a["losses"] == rep_b["losses"]


def test_train_apm_reduces_loss(apm_setup):
    corpus, features, params_text, params_audio = apm_setup
    cfg = ApmConfig(steps=400, batch_size=16)
    _, report = train_apm(corpus, features, params_text, params_audio, cfg, seed=17)
    assert np.mean(report["losses"][-40:]) < np.mean(report["losses"][:40])


def test_eval_apm_real_deterministic_and_fake_differs(apm_setup):
    corpus, features, params_text, params_audio = apm_setup
    cfg = ApmConfig(steps=60, batch_size=8)
    apm, _ = train_apm(corpus, features, params_text, params_audio, cfg, seed=19)
    real_a = eval_apm(corpus, features, params_text, params_audio, apm, "real", seed=23, i_max=cfg.i_max)
    real_b = eval_apm(corpus, features, params_text, params_audio, apm, "real", seed=23, i_max=cfg.i_max)
    assert real_a == real_b
    fake = eval_apm(corpus, features, params_text, params_audio, apm, "fake", seed=23, i_max=cfg.i_max)
    assert fake["mode"] == "fake"
    assert fake["per_dimension_rmse"] != real_a["per_dimension_rmse"]
    with pytest.raises(TrainingError, match="context_mode"):
        eval_apm(corpus, features, params_text, params_audio, apm, "bogus", seed=1)


def test_dataset_covers_all_targets(apm_setup):
    corpus, features, params_text, params_audio = apm_setup
    examples = build_dataset(corpus, features, params_text, params_audio, i_max=3)
    expected = sum(len(c.utterances) - 1 for c in corpus.conversations)
    assert len(examples) == expected
    for ex in examples:
        assert 1 <= len(ex.lpvs) <= 3
        assert ex.ctx_vec.shape == (64,)


def test_apm_params_pack_round_trip():
    params = random_params(21)
    theta = params.pack()
    back = ApmParams.from_vector(theta.copy(), params.ctx_dim, params.lpv_dim, params.attn_dim)
    for a, b in zip(params.arrays(), back.arrays()):
        assert np.array_equal(a, b)
