"""Downstream prosody prediction from context vectors.

A single-head attention predictor: the concatenated text+audio context
vector queries the prosody summaries of the history utterances (keys and
values), and an affine map of [context ; attended] predicts the target
utterance's 6-dim prosody summary. Trained with teacher forcing (true
history prosody supplied) and unweighted per-dimension MSE; the context
encoders stay frozen throughout.

This is the measurement head for whether context vectors carry
prosody-predictive information; it is deliberately utterance-level.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .encoder import EncoderParams, encode_windows
from .errors import TrainingError
from .features import FeatureSet, PROSODY_DIM
from .sampler import TripletSampler, make_context
from .util import (
    STREAM_APM_BATCH,
    STREAM_APM_EVAL,
    STREAM_APM_INIT,
    STREAM_GRADCHECK,
    stream_rng,
)


@dataclass
class ApmParams:
    ctx_dim: int
    lpv_dim: int
    attn_dim: int
    wq: np.ndarray     # (attn_dim, ctx_dim)
    wk: np.ndarray     # (attn_dim, lpv_dim)
    wv: np.ndarray     # (attn_dim, lpv_dim)
    w_out: np.ndarray  # (lpv_dim, ctx_dim + attn_dim)
    b_out: np.ndarray  # (lpv_dim,)

    def arrays(self) -> tuple[np.ndarray, ...]:
        return (self.wq, self.wk, self.wv, self.w_out, self.b_out)

    def pack(self) -> np.ndarray:
        return np.concatenate([a.ravel() for a in self.arrays()])

    @classmethod
    def shapes(cls, ctx_dim: int, lpv_dim: int, attn_dim: int):
        return [
            (attn_dim, ctx_dim),
            (attn_dim, lpv_dim),
            (attn_dim, lpv_dim),
            (lpv_dim, ctx_dim + attn_dim),
            (lpv_dim,),
        ]

    @classmethod
    def from_vector(cls, theta: np.ndarray, ctx_dim: int, lpv_dim: int, attn_dim: int) -> "ApmParams":
        arrays = []
        offset = 0
        for shape in cls.shapes(ctx_dim, lpv_dim, attn_dim):
            size = int(np.prod(shape))
            arrays.append(theta[offset : offset + size].reshape(shape))
            offset += size
        return cls(ctx_dim, lpv_dim, attn_dim, *arrays)

    @classmethod
    def from_reader(cls, reader, ctx_dim: int, lpv_dim: int, attn_dim: int) -> "ApmParams":
        arrays = [reader.array(shape) for shape in cls.shapes(ctx_dim, lpv_dim, attn_dim)]
        return cls(ctx_dim, lpv_dim, attn_dim, *arrays)


def init_apm(seed, ctx_dim: int, attn_dim: int = 16, lpv_dim: int = PROSODY_DIM) -> ApmParams:
    """Xavier-uniform maps, except the query projection starts at zero so
    attention begins as uniform pooling whatever the context-vector scale."""
    rng = np.random.default_rng(seed)
    theta = np.zeros(sum(int(np.prod(s)) for s in ApmParams.shapes(ctx_dim, lpv_dim, attn_dim)))
    params = ApmParams.from_vector(theta, ctx_dim, lpv_dim, attn_dim)
    for arr in (params.wk, params.wv, params.w_out):
        fan_out, fan_in = arr.shape
        bound = np.sqrt(6.0 / (fan_in + fan_out))
        arr[:] = rng.uniform(-bound, bound, size=arr.shape)
    return params


def _attention(params: ApmParams, ctx_vec: np.ndarray, lpvs: np.ndarray):
    q = params.wq @ ctx_vec
    keys = lpvs @ params.wk.T
    values = lpvs @ params.wv.T
    scores = keys @ q / np.sqrt(params.attn_dim)
    shifted = scores - scores.max()
    weights = np.exp(shifted)
    weights /= weights.sum()
    attended = values.T @ weights
    return q, keys, values, scores, weights, attended


def predict_lpv(ctx_vec: np.ndarray, lpvs: np.ndarray, params: ApmParams) -> np.ndarray:
    """Predict the target's prosody summary from context vector and history."""
    pred, _ = predict_lpv_detailed(ctx_vec, lpvs, params)
    return pred


def predict_lpv_detailed(ctx_vec: np.ndarray, lpvs: np.ndarray, params: ApmParams):
    """As predict_lpv, additionally returning the attention weights."""
    ctx_vec = np.asarray(ctx_vec, dtype=np.float64)
    lpvs = np.atleast_2d(np.asarray(lpvs, dtype=np.float64))
    if lpvs.shape[0] == 0:
        raise TrainingError("prosody prediction needs a non-empty history")
    if ctx_vec.shape != (params.ctx_dim,):
        raise TrainingError(f"context dim {ctx_vec.shape} does not match ctx_dim {params.ctx_dim}")
    if lpvs.shape[1] != params.lpv_dim:
        raise TrainingError(f"history prosody dim {lpvs.shape[1]} does not match {params.lpv_dim}")
    _, _, _, _, weights, attended = _attention(params, ctx_vec, lpvs)
    pred = params.w_out @ np.concatenate([ctx_vec, attended]) + params.b_out
    return pred, weights


def _example_grads(params: ApmParams, ctx_vec, lpvs, g_pred, grads: ApmParams) -> None:
    """Accumulate gradients of (g_pred . prediction) into grads."""
    q, keys, values, _, weights, attended = _attention(params, ctx_vec, lpvs)
    z = np.concatenate([ctx_vec, attended])
    grads.b_out += g_pred
    grads.w_out += np.outer(g_pred, z)
    dz = params.w_out.T @ g_pred
    d_att = dz[params.ctx_dim :]
    d_values = np.outer(weights, d_att)
    d_weights = values @ d_att
    d_scores = weights * (d_weights - weights @ d_weights)
    scale = 1.0 / np.sqrt(params.attn_dim)
    dq = keys.T @ d_scores * scale
    d_keys = np.outer(d_scores, q) * scale
    grads.wq += np.outer(dq, ctx_vec)
    grads.wk += d_keys.T @ lpvs
    grads.wv += d_values.T @ lpvs


# ---------------------------------------------------------------------------
# Dataset assembly (encoders frozen)
# ---------------------------------------------------------------------------

@dataclass
class ApmConfig:
    attn_dim: int = 16
    steps: int = 3000
    learning_rate: float = 5e-3
    batch_size: int = 64
    i_max: int = 2
    weight_decay: float = 1e-2
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8

    def to_dict(self) -> dict:
        return {
            "attn_dim": self.attn_dim,
            "steps": self.steps,
            "learning_rate": self.learning_rate,
            "batch_size": self.batch_size,
            "i_max": self.i_max,
            "weight_decay": self.weight_decay,
            "adam_beta1": self.adam_beta1,
            "adam_beta2": self.adam_beta2,
            "adam_eps": self.adam_eps,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ApmConfig":
        return cls(**d)


@dataclass
class ApmExample:
    conversation_id: str
    target_index: int
    ctx_vec: np.ndarray
    lpvs: np.ndarray
    target: np.ndarray


def concat_context_vectors(windows, features, params_text, params_audio) -> np.ndarray:
    vt = encode_windows(windows, features, params_text, "text")
    va = encode_windows(windows, features, params_audio, "audio")
    return np.concatenate([vt, va], axis=1)


def build_dataset(
    corpus,
    features: FeatureSet,
    params_text: EncoderParams,
    params_audio: EncoderParams,
    i_max: int = 5,
    windows=None,
) -> list[ApmExample]:
    """Teacher-forced examples for every target with history.

    ``windows`` overrides the per-target history (used by fake-context
    evaluation); the regression target is always the true utterance.
    """
    targets = [
        (conv, t) for conv in corpus.conversations for t in range(1, len(conv.utterances))
    ]
    if windows is None:
        windows = [make_context(conv, t, min(i_max, t)) for conv, t in targets]
    ctx = concat_context_vectors(windows, features, params_text, params_audio)
    examples = []
    for (conv, t), win, vec in zip(targets, windows, ctx):
        lpvs = np.stack([features.prosody_stats(u.conversation_id, u.index) for u in win.entries])
        target = features.prosody_stats(conv.id, t)
        examples.append(ApmExample(conv.id, t, vec, lpvs, target))
    return examples


def dataset_mse(examples, params: ApmParams) -> float:
    errs = [
        np.mean((predict_lpv(ex.ctx_vec, ex.lpvs, params) - ex.target) ** 2) for ex in examples
    ]
    return float(np.mean(errs))


def train_apm(
    train_corpus,
    features: FeatureSet,
    params_text: EncoderParams,
    params_audio: EncoderParams,
    cfg: ApmConfig,
    seed: int,
    holdout_corpus=None,
) -> tuple[ApmParams, dict]:
    """Adam on teacher-forced MSE; encoders are read-only throughout."""
    examples = build_dataset(train_corpus, features, params_text, params_audio, cfg.i_max)
    if not examples:
        raise TrainingError("no prosody-prediction examples in corpus")
    ctx_dim = examples[0].ctx_vec.shape[0]
    params = init_apm(np.random.SeedSequence((seed, STREAM_APM_INIT)), ctx_dim, cfg.attn_dim)
    theta = params.pack()
    params = ApmParams.from_vector(theta, ctx_dim, params.lpv_dim, cfg.attn_dim)

    m = np.zeros_like(theta)
    v = np.zeros_like(theta)
    losses = []
    for step in range(cfg.steps):
        rng = stream_rng(seed, STREAM_APM_BATCH, step)
        idx = rng.integers(len(examples), size=cfg.batch_size)
        grads = ApmParams.from_vector(np.zeros_like(theta), ctx_dim, params.lpv_dim, cfg.attn_dim)
        loss = 0.0
        for i in idx:
            ex = examples[int(i)]
            pred = predict_lpv(ex.ctx_vec, ex.lpvs, params)
            err = pred - ex.target
            loss += float(np.mean(err**2))
            g_pred = 2.0 * err / (params.lpv_dim * cfg.batch_size)
            _example_grads(params, ex.ctx_vec, ex.lpvs, g_pred, grads)
        loss /= cfg.batch_size
        if not np.isfinite(loss):
            raise TrainingError(f"non-finite prosody loss at step {step}")
        losses.append(loss)
        grad = grads.pack()
        m = cfg.adam_beta1 * m + (1 - cfg.adam_beta1) * grad
        v = cfg.adam_beta2 * v + (1 - cfg.adam_beta2) * grad**2
        t = step + 1
        m_hat = m / (1 - cfg.adam_beta1**t)
        v_hat = v / (1 - cfg.adam_beta2**t)
        # Decoupled weight decay on the maps only; the output bias absorbs
        # the prosody means. The tiny teacher-forced dataset overfits badly
        # without it.
        decay = np.full_like(theta, cfg.weight_decay)
        decay[-params.lpv_dim :] = 0.0
        theta -= cfg.learning_rate * (m_hat / (np.sqrt(v_hat) + cfg.adam_eps) + decay * theta)

    report = {
        "seed": seed,
        "config": cfg.to_dict(),
        "losses": losses,
        "final_train_mse": dataset_mse(examples, params),
        "n_examples": len(examples),
    }
    if holdout_corpus is not None:
        holdout = build_dataset(holdout_corpus, features, params_text, params_audio, cfg.i_max)
        report["holdout_mse"] = dataset_mse(holdout, params)
        report["n_holdout_examples"] = len(holdout)
    return params, report


def eval_apm(
    corpus,
    features: FeatureSet,
    params_text: EncoderParams,
    params_audio: EncoderParams,
    apm: ApmParams,
    context_mode: str = "real",
    seed: int = 0,
    i_max: int = 5,
) -> dict:
    """Held-out prediction error under the true or a substituted history.

    Fake mode swaps every target's window (context vector and history
    prosody alike) for one sampled from an unrelated conversation; the
    regression target stays the true utterance.
    """
    if context_mode not in ("real", "fake"):
        raise TrainingError(f"context_mode must be 'real' or 'fake', got {context_mode!r}")
    windows = None
    if context_mode == "fake":
        sampler = TripletSampler(corpus, i_max)
        rng = stream_rng(seed, STREAM_APM_EVAL)
        windows = []
        for conv in corpus.conversations:
            for t in range(1, len(conv.utterances)):
                anchor = make_context(conv, t, min(i_max, t))
                fake = sampler.sample_unrelated(anchor, rng)
                assert fake.conversation_id != conv.id
                windows.append(fake)
    examples = build_dataset(corpus, features, params_text, params_audio, i_max, windows=windows)
    preds = np.stack([predict_lpv(ex.ctx_vec, ex.lpvs, apm) for ex in examples])
    truth = np.stack([ex.target for ex in examples])
    per_dim_rmse = np.sqrt(np.mean((preds - truth) ** 2, axis=0))
    voiced = truth[:, 2] > 0
    if voiced.any():
        abs_err = np.abs(preds[voiced, 0] - truth[voiced, 0])
        lf0_rmse = float(np.sqrt(np.mean(abs_err**2)))
        lf0_err_mean = float(abs_err.mean())
        lf0_err_std = float(abs_err.std())  # spread across targets, not a CI
    else:
        lf0_rmse = lf0_err_mean = lf0_err_std = None
    return {
        "mode": context_mode,
        "seed": seed,
        "n_targets": len(examples),
        "per_dimension_rmse": per_dim_rmse.tolist(),
        "mean_rmse": float(per_dim_rmse.mean()),
        "log_f0_rmse": lf0_rmse,
        "log_f0_abs_error_mean": lf0_err_mean,
        "log_f0_abs_error_std_per_target": lf0_err_std,
        "dimension_order": [
            "mean_log_f0",
            "std_log_f0",
            "voiced_ratio",
            "mean_energy",
            "std_energy",
            "duration_s",
        ],
    }


def grad_check_apm(
    corpus,
    features: FeatureSet,
    params_text: EncoderParams,
    params_audio: EncoderParams,
    cfg: ApmConfig,
    seed: int,
    eps: float = 1e-4,
):
    """Finite differences of the batch MSE against the analytic gradients."""
    if eps <= 0:
        raise TrainingError("invalid epsilon: must be positive")
    examples = build_dataset(corpus, features, params_text, params_audio, cfg.i_max)
    rng = stream_rng(seed, STREAM_GRADCHECK)
    idx = rng.integers(len(examples), size=min(cfg.batch_size, len(examples)))
    batch = [examples[int(i)] for i in idx]
    ctx_dim = batch[0].ctx_vec.shape[0]
    params = init_apm(np.random.SeedSequence((seed, STREAM_APM_INIT)), ctx_dim, cfg.attn_dim)
    theta = params.pack()

    def loss_at(vec: np.ndarray) -> float:
        p = ApmParams.from_vector(vec, ctx_dim, params.lpv_dim, cfg.attn_dim)
        return float(
            np.mean([np.mean((predict_lpv(ex.ctx_vec, ex.lpvs, p) - ex.target) ** 2) for ex in batch])
        )

    grads = ApmParams.from_vector(np.zeros_like(theta), ctx_dim, params.lpv_dim, cfg.attn_dim)
    live = ApmParams.from_vector(theta, ctx_dim, params.lpv_dim, cfg.attn_dim)
    for ex in batch:
        pred = predict_lpv(ex.ctx_vec, ex.lpvs, live)
        g_pred = 2.0 * (pred - ex.target) / (params.lpv_dim * len(batch))
        _example_grads(live, ex.ctx_vec, ex.lpvs, g_pred, grads)
    analytic = grads.pack()

    numeric = np.zeros_like(theta)
    for i in range(theta.size):
        orig = theta[i]
        theta[i] = orig + eps
        up = loss_at(theta)
        theta[i] = orig - eps
        down = loss_at(theta)
        theta[i] = orig
        numeric[i] = (up - down) / (2 * eps)

    denom = np.maximum(np.abs(analytic) + np.abs(numeric), 1e-6)
    from .training import GradCheckResult

    return GradCheckResult(
        max_rel_error=float(np.max(np.abs(analytic - numeric) / denom)),
        n_params=theta.size,
        n_triplets=len(batch),
    )
