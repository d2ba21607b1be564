import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from convctx.encoder import load_checkpoint
from convctx.errors import TrainingError
from convctx.features import featurize_corpus, FrameParams
from convctx.sampler import TripletSampler
from convctx.training import (
    LossConfig,
    _pairwise_terms,
    _triplet_terms,
    batch_loss,
    grad_check,
    init_encoder_pair,
    pairwise_contrastive_loss,
    squared_euclidean,
    train,
    triplet_loss,
)


def test_squared_euclidean_basics():
    assert squared_euclidean([0.0, 0.0], [3.0, 4.0]) == 25.0
    x = np.array([1.0, -2.0, 0.5])
    assert squared_euclidean(x, x) == 0.0
    rng = np.random.default_rng(0)
    for _ in range(20):
        a, b = rng.normal(size=(2, 5))
        assert squared_euclidean(a, b) == squared_euclidean(b, a)
    with pytest.raises(TrainingError, match="dimension mismatch"):
        squared_euclidean([1.0], [1.0, 2.0])


def test_triplet_loss_examples():
    # Direct evaluation of the hinge objective.
    assert triplet_loss([0, 0], [0, 1], [3, 0], 1.0) == 0.0
    assert triplet_loss([0, 0], [2, 0], [1, 0], 1.0) == 4.0
    p = np.array([0.3, -0.7])
    assert triplet_loss(np.zeros(2), p, p, 1.0) == 1.0


def test_pairwise_loss_examples():
    v = np.array([1.0, 2.0])
    assert pairwise_contrastive_loss(v, v, same=True, margin=2.0) == 0.0
    far = np.array([10.0, 2.0])
    assert pairwise_contrastive_loss(v, far, same=False, margin=2.0) == 0.0
    # D = 1, margin 2: 0.5 * (2 - 1)^2
    assert pairwise_contrastive_loss(np.zeros(1), np.ones(1), same=False, margin=2.0) == 0.5


@settings(max_examples=80, deadline=None)
@given(st.lists(st.floats(-5, 5), min_size=2, max_size=4))
def test_triplet_loss_invariants(values):
    rng = np.random.default_rng(abs(hash(tuple(values))) % 2**32)
    d = len(values)
    a = np.array(values)
    p, n = rng.normal(size=(2, d))
    m = 0.5 + float(rng.random())
    loss = triplet_loss(a, p, n, m)
    assert loss >= 0.0
    # Hinge characterization of zero loss.
    satisfied = squared_euclidean(a, p) + m <= squared_euclidean(a, n)
    assert (loss == 0.0) == satisfied
    # Translation invariance.
    shift = rng.normal(size=d)
    assert abs(triplet_loss(a + shift, p + shift, n + shift, m) - loss) < 1e-9


def test_term_gradients_zero_when_inactive():
    A = np.array([[0.0, 0.0]])
    P = np.array([[0.1, 0.0]])
    N = np.array([[5.0, 0.0]])
    losses, ga, gp, gn = _triplet_terms(A, P, N, margin=1.0)
    assert losses[0] == 0.0
    assert np.all(ga == 0) and np.all(gp == 0) and np.all(gn == 0)
    losses, ga, gp, gn = _pairwise_terms(A, A, N, margin=1.0)
    assert losses[0] == 0.0
    assert np.all(ga == 0) and np.all(gp == 0) and np.all(gn == 0)


@pytest.fixture(scope="module")
def train_setup(small_setup):
    corpus, features, out, _ = small_setup
    sampler = TripletSampler(corpus, i_max=5)
    return corpus, features, sampler


def test_single_triplet_batch_decomposes(train_setup):
    corpus, features, sampler = train_setup
    from convctx.encoder import encode

    cfg = LossConfig(strategy="S2", steps=1)
    params_text, params_audio = init_encoder_pair(4, features.hash_dim)
    (triplet,) = sampler.build_batch(1, "S2", np.random.default_rng(2))
    result = batch_loss([triplet], params_text, params_audio, features, cfg)
    expected = 0.0
    for params, modality in ((params_text, "text"), (params_audio, "audio")):
        h = {
            role: encode(getattr(triplet, role), features, params, modality)
            for role in ("anchor", "positive", "negative")
        }
        expected += triplet_loss(h["anchor"], h["positive"], h["negative"], cfg.margin)
    assert abs(result.total - expected) < 1e-12


def test_duplicated_triplet_mean_invariance(train_setup):
    corpus, features, sampler = train_setup
    cfg = LossConfig(steps=1)
    params_text, params_audio = init_encoder_pair(4, features.hash_dim)
    (triplet,) = sampler.build_batch(1, "S3", np.random.default_rng(3))
    one = batch_loss([triplet], params_text, params_audio, features, cfg)
    four = batch_loss([triplet] * 4, params_text, params_audio, features, cfg)
    assert abs(one.total - four.total) < 1e-12


def test_satisfied_batch_has_zero_loss_and_grads(train_setup):
    corpus, features, sampler = train_setup
    from convctx.encoder import encode

    cfg = LossConfig(strategy="S3", steps=1)
    params_text, params_audio = init_encoder_pair(4, features.hash_dim)
    # Keep triplets whose positive is strictly closer in both modalities,
    # then scale the output maps until every margin is cleared: scaling
    # multiplies all squared distances, so the hinge goes inactive.
    batch = sampler.build_batch(64, "S3", np.random.default_rng(8))
    kept = []
    for t in batch:
        ok = True
        for params, modality in ((params_text, "text"), (params_audio, "audio")):
            h = {
                role: encode(getattr(t, role), features, params, modality)
                for role in ("anchor", "positive", "negative")
            }
            if squared_euclidean(h["anchor"], h["positive"]) >= squared_euclidean(h["anchor"], h["negative"]):
                ok = False
        if ok:
            kept.append(t)
    assert len(kept) >= 4
    params_text.w_out *= 1e4
    params_audio.w_out *= 1e4
    result = batch_loss(kept, params_text, params_audio, features, cfg)
    assert result.total == 0.0
    for grads in (result.grads_text, result.grads_audio):
        for arr in grads.arrays():
            assert np.all(arr == 0)


def test_train_zero_learning_rate_keeps_params(train_setup, tmp_path):
    corpus, features, _ = train_setup
    cfg = LossConfig(steps=10, learning_rate=0.0, eval_every=10, eval_triplets=20)
    train(corpus, features, cfg, seed=5, out_dir=tmp_path)
    params_text, params_audio, _, _ = load_checkpoint(tmp_path / "checkpoint.ckpt")
    init_text, init_audio = init_encoder_pair(5, features.hash_dim)
    assert np.array_equal(params_text.pack(), init_text.pack())
    assert np.array_equal(params_audio.pack(), init_audio.pack())


def test_train_is_deterministic(train_setup, tmp_path):
    corpus, features, _ = train_setup
    cfg = LossConfig(steps=60, eval_every=30, eval_triplets=30)
    a_dir = tmp_path / "a"
    b_dir = tmp_path / "b"
    train(corpus, features, cfg, seed=9, out_dir=a_dir)
    train(corpus, features, cfg, seed=9, out_dir=b_dir)
    assert (a_dir / "train_report.json").read_bytes() == (b_dir / "train_report.json").read_bytes()
    assert (a_dir / "checkpoint.ckpt").read_bytes() == (b_dir / "checkpoint.ckpt").read_bytes()
    assert (a_dir / "loss_curve.csv").read_bytes() == (b_dir / "loss_curve.csv").read_bytes()


def test_train_loss_trends_down(train_setup, tmp_path):
    corpus, features, _ = train_setup
    cfg = LossConfig(steps=400, eval_every=200, eval_triplets=50)
    report = train(corpus, features, cfg, seed=3, out_dir=tmp_path)
    first = np.mean(report.losses_total[:100])
    last = np.mean(report.losses_total[-100:])
    assert last < first
    sat = [r["concat"] for r in report.satisfaction]
    assert sat[-1] > sat[0]


def test_train_report_excludes_wall_time(train_setup, tmp_path):
    corpus, features, _ = train_setup
    cfg = LossConfig(steps=5, eval_every=5, eval_triplets=10)
    report = train(corpus, features, cfg, seed=2, out_dir=tmp_path)
    assert report.wall_time_s > 0.0
    on_disk = json.loads((tmp_path / "train_report.json").read_text())
    assert "wall_time_s" not in on_disk
    assert (tmp_path / "timing.txt").exists()


def test_train_aborts_on_non_finite(train_setup, tmp_path):
    corpus, features, _ = train_setup
    from convctx.features import FeatureSet

    poisoned = FeatureSet(hash_dim=features.hash_dim)
    poisoned.text = dict(features.text)
    poisoned.prosody = {k: np.full(6, np.nan) for k in features.prosody}
    cfg = LossConfig(steps=10, eval_every=10, eval_triplets=5)
    with pytest.raises(TrainingError, match="non-finite loss at step"):
        train(corpus, poisoned, cfg, seed=1, out_dir=tmp_path)
    assert (tmp_path / "failed_batch.jsonl").exists()


@pytest.fixture(scope="module")
def grad_setup(small_setup, tmp_path_factory):
    corpus, _, out, _ = small_setup
    # Re-featurize at a compact hash size so the full-parameter sweep is fast.
    feat_dir = tmp_path_factory.mktemp("grad_features")
    features = featurize_corpus(corpus, FrameParams(), hash_dim=64, out_dir=feat_dir)
    return corpus, features


def test_grad_check_triplet_and_pairwise(grad_setup):
    corpus, features = grad_setup
    for strategy in ("S3", "S1"):
        cfg = LossConfig(strategy=strategy, batch_size=4)
        result = grad_check(corpus, features, cfg, seed=6, eps=1e-4)
        assert result.max_rel_error < 1e-4
        assert result.n_triplets >= 1


def test_grad_check_rejects_bad_epsilon(grad_setup):
    corpus, features = grad_setup
    with pytest.raises(TrainingError, match="invalid epsilon"):
        grad_check(corpus, features, LossConfig(batch_size=2), seed=1, eps=0.0)


def test_loss_config_validation():
    with pytest.raises(TrainingError):
        LossConfig(strategy="S9")
    with pytest.raises(TrainingError):
        LossConfig(margin=0.0)
    with pytest.raises(TrainingError):
        LossConfig(batch_size=0)
    assert LossConfig(strategy="S1").loss_kind == "pairwise"
    assert LossConfig(strategy="S2").loss_kind == "triplet"
    assert LossConfig(strategy="S3").hard_negatives
