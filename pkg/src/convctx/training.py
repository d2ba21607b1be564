"""Contrastive pretext training of the context encoders.

Loss variants match the ablation lineup: S1 uses the classic pairwise
contrastive loss (anchor/positive as a similar pair, anchor/negative as a
dissimilar pair), S2 the margin triplet loss with inter-speaker negatives
only, S3 the same triplet loss with alternating inter/intra (shared-speaker)
negatives. The batch objective is the mean over elements of the text-side
plus audio-side loss; the two encoders hold disjoint parameters and are
updated jointly by Adam.

Distances are squared Euclidean throughout. The hinge subgradient at an
argument of exactly zero is taken as zero; the gradient checker skips
configurations within 10*eps of a kink so finite differences stay valid.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import metrics
from .encoder import (
    EncoderDims,
    EncoderParams,
    WindowBank,
    batch_backward,
    batch_forward,
    init_params,
    params_from_vector,
    save_checkpoint,
    zero_grads,
)
from .errors import TrainingError
from .features import FeatureSet, PROSODY_DIM
from .sampler import STRATEGIES, Triplet, TripletSampler, dump_triplets
from .util import (
    STREAM_BATCH,
    STREAM_EVAL,
    STREAM_GRADCHECK,
    STREAM_INIT_AUDIO,
    STREAM_INIT_TEXT,
    stream_rng,
    write_csv,
    write_json,
)

PAIRWISE = "pairwise"
TRIPLET = "triplet"


@dataclass
class LossConfig:
    strategy: str = "S3"
    margin: float = 1.0
    batch_size: int = 16
    steps: int = 2000
    learning_rate: float = 1e-3
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    i_max: int = 5
    text_weight: float = 1.0
    audio_weight: float = 1.0
    eval_every: int = 200
    eval_triplets: int = 200

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise TrainingError(f"unknown strategy {self.strategy!r}")
        if self.margin <= 0:
            raise TrainingError("margin must be positive")
        if self.batch_size < 1:
            raise TrainingError("batch_size must be at least 1")
        if self.learning_rate < 0:
            raise TrainingError("learning rate must be non-negative")

    @property
    def loss_kind(self) -> str:
        return PAIRWISE if self.strategy == "S1" else TRIPLET

    @property
    def hard_negatives(self) -> bool:
        return self.strategy == "S3"

    def to_dict(self) -> dict:
        return {
            "strategy": self.strategy,
            "loss_kind": self.loss_kind,
            "margin": self.margin,
            "batch_size": self.batch_size,
            "steps": self.steps,
            "learning_rate": self.learning_rate,
            "adam_beta1": self.adam_beta1,
            "adam_beta2": self.adam_beta2,
            "adam_eps": self.adam_eps,
            "i_max": self.i_max,
            "text_weight": self.text_weight,
            "audio_weight": self.audio_weight,
            "eval_every": self.eval_every,
            "eval_triplets": self.eval_triplets,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "LossConfig":
        kwargs = {k: v for k, v in d.items() if k != "loss_kind"}
        return cls(**kwargs)


# ---------------------------------------------------------------------------
# Losses
# ---------------------------------------------------------------------------

def squared_euclidean(a, b) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise TrainingError(f"dimension mismatch: {a.shape} vs {b.shape}")
    return float(np.sum((a - b) ** 2))


def triplet_loss(h_a, h_p, h_n, margin: float) -> float:
    """max(D(a,p) - D(a,n) + margin, 0) with squared Euclidean D."""
    if margin <= 0:
        raise TrainingError("margin must be positive")
    return max(squared_euclidean(h_a, h_p) - squared_euclidean(h_a, h_n) + margin, 0.0)


def pairwise_contrastive_loss(h_x, h_y, same: bool, margin: float) -> float:
    """Classic two-branch contrastive loss on a labeled pair."""
    d = squared_euclidean(h_x, h_y)
    if same:
        return 0.5 * d
    return 0.5 * max(margin - np.sqrt(d), 0.0) ** 2


def _triplet_terms(A, P, N, margin):
    """Per-element losses and loss gradients w.r.t. the three embeddings."""
    dap = np.sum((A - P) ** 2, axis=1)
    dan = np.sum((A - N) ** 2, axis=1)
    arg = dap - dan + margin
    active = (arg > 0).astype(np.float64)[:, None]
    losses = np.maximum(arg, 0.0)
    ga = 2.0 * (N - P) * active
    gp = -2.0 * (A - P) * active
    gn = 2.0 * (A - N) * active
    return losses, ga, gp, gn


def _pairwise_terms(A, P, N, margin):
    """S1 terms: (anchor, positive) similar pair plus (anchor, negative)
    dissimilar pair. The sqrt kink at zero distance uses subgradient 0."""
    dap = np.sum((A - P) ** 2, axis=1)
    s = np.sqrt(np.sum((A - N) ** 2, axis=1))
    losses = 0.5 * dap + 0.5 * np.where(s < margin, (margin - s) ** 2, 0.0)
    coef = np.where((s > 0) & (s < margin), (margin - s) / np.maximum(s, 1e-300), 0.0)[:, None]
    ga = (A - P) - coef * (A - N)
    gp = -(A - P)
    gn = coef * (A - N)
    return losses, ga, gp, gn


@dataclass
class BatchLoss:
    total: float
    text: float
    audio: float
    grads_text: EncoderParams
    grads_audio: EncoderParams


def _forward_triplet_windows(triplets, features, params, modality, bank):
    windows = [t.anchor for t in triplets] + [t.positive for t in triplets] + [t.negative for t in triplets]
    if bank is not None:
        rows = bank.rows(windows)
        return bank.forward_rows(params, modality, rows)
    from .encoder import aggregate_windows

    agg, bucket_w = aggregate_windows(windows, features, modality, params.dims.n_buckets)
    out, cache = batch_forward(params, agg, bucket_w)
    return out, cache, bucket_w


def _modality_loss(triplets, features, params, modality, cfg, bank):
    n = len(triplets)
    out, cache, bucket_w = _forward_triplet_windows(triplets, features, params, modality, bank)
    A, P, N = out[:n], out[n : 2 * n], out[2 * n :]
    terms = _pairwise_terms if cfg.loss_kind == PAIRWISE else _triplet_terms
    losses, ga, gp, gn = terms(A, P, N, cfg.margin)
    mean_loss = float(losses.mean())
    upstream = np.concatenate([ga, gp, gn], axis=0) / n
    grads = batch_backward(params, cache, upstream, bucket_w)
    return mean_loss, grads


def batch_loss(
    triplets,
    params_text: EncoderParams,
    params_audio: EncoderParams,
    features: FeatureSet,
    cfg: LossConfig,
    bank: WindowBank | None = None,
) -> BatchLoss:
    """Mean batch objective and exact parameter gradients for both encoders."""
    if not triplets:
        raise TrainingError("empty batch")
    text_loss, grads_text = _modality_loss(triplets, features, params_text, "text", cfg, bank)
    audio_loss, grads_audio = _modality_loss(triplets, features, params_audio, "audio", cfg, bank)
    total = cfg.text_weight * text_loss + cfg.audio_weight * audio_loss
    for grads, weight in ((grads_text, cfg.text_weight), (grads_audio, cfg.audio_weight)):
        for arr in grads.arrays():
            arr *= weight
    return BatchLoss(total, text_loss, audio_loss, grads_text, grads_audio)


# ---------------------------------------------------------------------------
# Optimizer and training loop
# ---------------------------------------------------------------------------

class Adam:
    def __init__(self, n: int, cfg: LossConfig):
        self.m = np.zeros(n)
        self.v = np.zeros(n)
        self.t = 0
        self.cfg = cfg

    def update(self, theta: np.ndarray, grad: np.ndarray) -> None:
        c = self.cfg
        self.t += 1
        self.m = c.adam_beta1 * self.m + (1 - c.adam_beta1) * grad
        self.v = c.adam_beta2 * self.v + (1 - c.adam_beta2) * grad**2
        m_hat = self.m / (1 - c.adam_beta1**self.t)
        v_hat = self.v / (1 - c.adam_beta2**self.t)
        theta -= c.learning_rate * m_hat / (np.sqrt(v_hat) + c.adam_eps)


@dataclass
class TrainReport:
    seed: int
    config: dict
    losses_total: list = field(default_factory=list)
    losses_text: list = field(default_factory=list)
    losses_audio: list = field(default_factory=list)
    satisfaction: list = field(default_factory=list)
    checkpoint_path: str = ""
    wall_time_s: float = 0.0

    def to_dict(self) -> dict:
        # wall_time_s deliberately excluded: serialized reports must be
        # byte-identical across reruns with the same config and seed.
        return {
            "seed": self.seed,
            "config": self.config,
            "losses_total": self.losses_total,
            "losses_text": self.losses_text,
            "losses_audio": self.losses_audio,
            "satisfaction": self.satisfaction,
            "checkpoint_path": self.checkpoint_path,
        }


def default_encoder_dims(hash_dim: int) -> tuple[EncoderDims, EncoderDims]:
    return EncoderDims(input_dim=hash_dim), EncoderDims(input_dim=PROSODY_DIM)


def init_encoder_pair(seed: int, hash_dim: int) -> tuple[EncoderParams, EncoderParams]:
    dims_text, dims_audio = default_encoder_dims(hash_dim)
    params_text = init_params(np.random.SeedSequence((seed, STREAM_INIT_TEXT)), dims_text)
    params_audio = init_params(np.random.SeedSequence((seed, STREAM_INIT_AUDIO)), dims_audio)
    return params_text, params_audio


def train(
    corpus,
    features: FeatureSet,
    cfg: LossConfig,
    seed: int,
    out_dir,
    holdout_corpus=None,
) -> TrainReport:
    """Run the pretext optimization and write checkpoint, report, loss curve.

    Fully deterministic in (corpus, features, cfg, seed): batches are drawn
    from per-step RNG streams, and the held-out satisfaction triplets from a
    dedicated stream over holdout_corpus (the training corpus if not given).
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    started = time.perf_counter()

    sampler = TripletSampler(corpus, cfg.i_max)
    params_text, params_audio = init_encoder_pair(seed, features.hash_dim)
    theta_text = params_text.pack()
    theta_audio = params_audio.pack()
    params_text = params_from_vector(theta_text, params_text.dims)
    params_audio = params_from_vector(theta_audio, params_audio.dims)
    bank = WindowBank(sampler, features, params_text.dims.n_buckets)

    eval_sampler = TripletSampler(holdout_corpus, cfg.i_max) if holdout_corpus is not None else sampler
    eval_bank = (
        WindowBank(eval_sampler, features, params_text.dims.n_buckets)
        if holdout_corpus is not None
        else bank
    )
    eval_triplets = eval_sampler.build_batch(cfg.eval_triplets, "S3", stream_rng(seed, STREAM_EVAL))

    report = TrainReport(seed=seed, config=cfg.to_dict())
    adam_text = Adam(theta_text.size, cfg)
    adam_audio = Adam(theta_audio.size, cfg)

    def record_satisfaction(step: int) -> None:
        sat = metrics.triplet_satisfaction(
            eval_triplets, params_text, params_audio, features, cfg.margin, bank=eval_bank
        )
        report.satisfaction.append(
            {"step": step, "text": sat.text, "audio": sat.audio, "concat": sat.concat}
        )

    record_satisfaction(0)
    for step in range(cfg.steps):
        rng = stream_rng(seed, STREAM_BATCH, step)
        triplets = sampler.build_batch(cfg.batch_size, cfg.strategy, rng)
        result = batch_loss(triplets, params_text, params_audio, features, cfg, bank=bank)
        if not np.isfinite(result.total):
            dump_triplets(triplets, out_dir / "failed_batch.jsonl")
            raise TrainingError(
                f"non-finite loss at step {step}; offending batch dumped to failed_batch.jsonl"
            )
        report.losses_total.append(result.total)
        report.losses_text.append(result.text)
        report.losses_audio.append(result.audio)
        adam_text.update(theta_text, result.grads_text.pack())
        adam_audio.update(theta_audio, result.grads_audio.pack())
        if (step + 1) % cfg.eval_every == 0 or step + 1 == cfg.steps:
            record_satisfaction(step + 1)

    report.checkpoint_path = "checkpoint.ckpt"
    save_checkpoint(
        params_text, params_audio, {"seed": seed, "step": cfg.steps}, out_dir / report.checkpoint_path
    )
    report.wall_time_s = time.perf_counter() - started
    write_json(out_dir / "train_report.json", report.to_dict())
    write_csv(
        out_dir / "loss_curve.csv",
        ["step", "total", "text", "audio"],
        [
            (i, report.losses_total[i], report.losses_text[i], report.losses_audio[i])
            for i in range(len(report.losses_total))
        ],
    )
    # Wall time lives outside the deterministic report by design.
    (out_dir / "timing.txt").write_text(f"wall_time_s={report.wall_time_s:.3f}\n", encoding="utf-8")
    return report


# ---------------------------------------------------------------------------
# Finite-difference gradient check
# ---------------------------------------------------------------------------

@dataclass
class GradCheckResult:
    max_rel_error: float
    n_params: int
    n_triplets: int

    def to_dict(self) -> dict:
        return {
            "max_rel_error": self.max_rel_error,
            "n_params": self.n_params,
            "n_triplets": self.n_triplets,
        }


def _kink_distance(triplets, params_text, params_audio, features, cfg, bank) -> np.ndarray:
    """Per-triplet distance to the nearest loss kink, minimized over modalities."""
    n = len(triplets)
    dist = np.full(n, np.inf)
    for params, modality in ((params_text, "text"), (params_audio, "audio")):
        out, _, _ = _forward_triplet_windows(triplets, features, params, modality, bank)
        A, P, N = out[:n], out[n : 2 * n], out[2 * n :]
        if cfg.loss_kind == TRIPLET:
            arg = np.sum((A - P) ** 2, axis=1) - np.sum((A - N) ** 2, axis=1) + cfg.margin
            dist = np.minimum(dist, np.abs(arg))
        else:
            s = np.sqrt(np.sum((A - N) ** 2, axis=1))
            dist = np.minimum(dist, np.abs(s - cfg.margin))
            dist = np.minimum(dist, s)
    return dist


def grad_check(corpus, features: FeatureSet, cfg: LossConfig, seed: int, eps: float = 1e-4) -> GradCheckResult:
    """Central finite differences of the batch objective against the analytic
    gradients, over every parameter of both encoders on one random batch.

    Triplets within 10*eps of a hinge or sqrt kink are dropped (resampling if
    a whole batch lands there) so the two-sided difference stays one-sided.
    """
    if eps <= 0:
        raise TrainingError("invalid epsilon: must be positive")
    sampler = TripletSampler(corpus, cfg.i_max)
    params_text, params_audio = init_encoder_pair(seed, features.hash_dim)
    bank = WindowBank(sampler, features, params_text.dims.n_buckets)

    triplets = []
    for attempt in range(20):
        rng = stream_rng(seed, STREAM_GRADCHECK, attempt)
        candidates = sampler.build_batch(cfg.batch_size, cfg.strategy, rng)
        keep = _kink_distance(candidates, params_text, params_audio, features, cfg, bank) >= 10 * eps
        triplets = [t for t, ok in zip(candidates, keep) if ok]
        if triplets:
            break
    if not triplets:
        raise TrainingError("could not find a kink-free batch for the gradient check")

    result = batch_loss(triplets, params_text, params_audio, features, cfg, bank=bank)
    analytic = np.concatenate([result.grads_text.pack(), result.grads_audio.pack()])

    theta_text = params_text.pack()
    theta_audio = params_audio.pack()
    n_text = theta_text.size

    def loss_at(theta_t, theta_a) -> float:
        pt = params_from_vector(theta_t, params_text.dims)
        pa = params_from_vector(theta_a, params_audio.dims)
        return batch_loss(triplets, pt, pa, features, cfg, bank=bank).total

    theta = np.concatenate([theta_text, theta_audio])
    numeric = np.zeros_like(theta)
    for i in range(theta.size):
        orig = theta[i]
        theta[i] = orig + eps
        up = loss_at(theta[:n_text], theta[n_text:])
        theta[i] = orig - eps
        down = loss_at(theta[:n_text], theta[n_text:])
        theta[i] = orig
        numeric[i] = (up - down) / (2 * eps)

    denom = np.maximum(np.abs(analytic) + np.abs(numeric), 1e-6)
    max_rel = float(np.max(np.abs(analytic - numeric) / denom))
    return GradCheckResult(max_rel_error=max_rel, n_params=theta.size, n_triplets=len(triplets))
