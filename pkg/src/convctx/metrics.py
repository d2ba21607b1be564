"""Objective evaluation.

Frame-level speech metrics (mel-cepstral distortion and log-F0 RMSE over a
shared DTW alignment), embedding-level diagnostics (margin satisfaction rate,
real-versus-fake context sensitivity with a bootstrap interval), and a PCA
projection export for plotting context-vector distributions.

Conventions, echoed in report headers: MCD uses (10/ln 10) * sqrt(2 * sum of
squared cepstral differences) with the energy coefficient c0 excluded and the
mean taken over the alignment path; log-F0 RMSE uses natural log over frame
pairs voiced on both sides; one alignment, computed on the c0-less cepstra,
serves both metrics.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .encoder import EncoderParams, WindowBank, encode_windows
from .errors import MetricError
from .features import FeatureSet, FrameTrack
from .sampler import TripletSampler, make_context, sample_positive
from .util import STREAM_SENSITIVITY, stream_rng

MCD_CONST = 10.0 / np.log(10.0)

# DTW step set and tie-break order: diagonal first, then advancing the first
# sequence, then the second.
_STEPS = ((1, 1), (1, 0), (0, 1))


@dataclass
class DtwResult:
    path: list  # [(i, j)] from (0, 0) to (n-1, m-1)
    total_cost: float


def dtw(seq_a, seq_b) -> DtwResult:
    """Minimal-cost monotone alignment under Euclidean local distance."""
    a = np.atleast_2d(np.asarray(seq_a, dtype=np.float64))
    b = np.atleast_2d(np.asarray(seq_b, dtype=np.float64))
    if np.asarray(seq_a).ndim == 1:
        a = a.T
    if np.asarray(seq_b).ndim == 1:
        b = b.T
    if a.shape[0] == 0 or b.shape[0] == 0:
        raise MetricError("dtw: empty sequence")
    if a.shape[1] != b.shape[1]:
        raise MetricError(f"dtw: vector dims differ ({a.shape[1]} vs {b.shape[1]})")
    n, m = a.shape[0], b.shape[0]
    local = np.sqrt(((a[:, None, :] - b[None, :, :]) ** 2).sum(axis=2))

    cost = np.empty((n, m))
    choice = np.zeros((n, m), dtype=np.int8)  # index into _STEPS
    cost[0, 0] = local[0, 0]
    for i in range(1, n):
        cost[i, 0] = cost[i - 1, 0] + local[i, 0]
        choice[i, 0] = 1
    for j in range(1, m):
        cost[0, j] = cost[0, j - 1] + local[0, j]
        choice[0, j] = 2
    for i in range(1, n):
        for j in range(1, m):
            best, step = cost[i - 1, j - 1], 0
            if cost[i - 1, j] < best:
                best, step = cost[i - 1, j], 1
            if cost[i, j - 1] < best:
                best, step = cost[i, j - 1], 2
            cost[i, j] = best + local[i, j]
            choice[i, j] = step

    path = []
    i, j = n - 1, m - 1
    while True:
        path.append((i, j))
        if i == 0 and j == 0:
            break
        di, dj = _STEPS[choice[i, j]]
        i, j = i - di, j - dj
    path.reverse()
    return DtwResult(path=path, total_cost=float(cost[n - 1, m - 1]))


def align_cepstra(ref_cepstra: np.ndarray, hyp_cepstra: np.ndarray) -> DtwResult:
    """The shared alignment for MCD and log-F0 RMSE: DTW on c1..C-1."""
    ref = np.asarray(ref_cepstra, dtype=np.float64)
    hyp = np.asarray(hyp_cepstra, dtype=np.float64)
    if ref.ndim != 2 or hyp.ndim != 2:
        raise MetricError("cepstra must be 2-D (frames x coefficients)")
    if ref.shape[1] != hyp.shape[1]:
        raise MetricError("cepstral orders differ")
    if ref.shape[1] < 2:
        raise MetricError("need at least 2 cepstral coefficients (c0 is excluded)")
    return dtw(ref[:, 1:], hyp[:, 1:])


def mcd(ref_cepstra, hyp_cepstra, alignment: DtwResult | None = None) -> float:
    """Mel-cepstral distortion in dB, c0 excluded, mean over the DTW path."""
    ref = np.asarray(ref_cepstra, dtype=np.float64)
    hyp = np.asarray(hyp_cepstra, dtype=np.float64)
    if alignment is None:
        alignment = align_cepstra(ref, hyp)
    idx = np.asarray(alignment.path)
    diffs = ref[idx[:, 0], 1:] - hyp[idx[:, 1], 1:]
    per_pair = MCD_CONST * np.sqrt(2.0 * np.sum(diffs**2, axis=1))
    return float(per_pair.mean())


def log_f0_rmse(ref_f0, hyp_f0, alignment: DtwResult) -> float | None:
    """RMSE of natural-log F0 over aligned frame pairs voiced on both sides.

    Returns None when no aligned pair is mutually voiced.
    """
    ref = np.asarray(ref_f0, dtype=np.float64)
    hyp = np.asarray(hyp_f0, dtype=np.float64)
    idx = np.asarray(alignment.path)
    if idx[-1, 0] != len(ref) - 1 or idx[-1, 1] != len(hyp) - 1:
        raise MetricError(
            f"track/alignment length mismatch (path ends at {tuple(idx[-1])}, "
            f"tracks have {len(ref)}/{len(hyp)} frames)"
        )
    r = ref[idx[:, 0]]
    h = hyp[idx[:, 1]]
    both = (r > 0) & (h > 0)
    if not both.any():
        return None
    err = np.log(r[both]) - np.log(h[both])
    return float(np.sqrt(np.mean(err**2)))


def evaluate_tracks(ref: FrameTrack, hyp: FrameTrack) -> dict:
    """MCD and log-F0 RMSE of two utterances over one shared alignment."""
    alignment = align_cepstra(ref.cepstra, hyp.cepstra)
    rmse = log_f0_rmse(ref.f0, hyp.f0, alignment)
    return {
        "mcd_db": mcd(ref.cepstra, hyp.cepstra, alignment),
        "log_f0_rmse": rmse,
        "n_aligned": len(alignment.path),
        "convention": "MCD=(10/ln10)*sqrt(2*sum d_1..C-1), mean over DTW path, c0 excluded; log-F0 natural log",
    }


# ---------------------------------------------------------------------------
# Embedding diagnostics
# ---------------------------------------------------------------------------

def _triplet_distances(triplets, params, modality, features, bank):
    n = len(triplets)
    windows = [t.anchor for t in triplets] + [t.positive for t in triplets] + [t.negative for t in triplets]
    if bank is not None:
        out, _, _ = bank.forward_rows(params, modality, bank.rows(windows))
    else:
        out = encode_windows(windows, features, params, modality)
    A, P, N = out[:n], out[n : 2 * n], out[2 * n :]
    dap = np.sum((A - P) ** 2, axis=1)
    dan = np.sum((A - N) ** 2, axis=1)
    return dap, dan


@dataclass
class SatisfactionReport:
    """Fraction of triplets with D(anchor, positive) + margin < D(anchor, negative)."""

    n: int
    margin: float
    text: float
    audio: float
    concat: float
    by_class: dict

    def to_dict(self) -> dict:
        return {
            "n": self.n,
            "margin": self.margin,
            "text": self.text,
            "audio": self.audio,
            "concat": self.concat,
            "by_class": self.by_class,
        }


def triplet_satisfaction(
    triplets,
    params_text: EncoderParams,
    params_audio: EncoderParams,
    features: FeatureSet,
    margin: float,
    bank: WindowBank | None = None,
) -> SatisfactionReport:
    """Margin satisfaction per modality and on the concatenated embedding.

    Concatenation needs no extra encoding pass: its squared distance is the
    sum of the per-modality squared distances.
    """
    if not triplets:
        raise MetricError("no triplets to evaluate")
    dap_t, dan_t = _triplet_distances(triplets, params_text, "text", features, bank)
    dap_a, dan_a = _triplet_distances(triplets, params_audio, "audio", features, bank)
    ok_text = dap_t + margin < dan_t
    ok_audio = dap_a + margin < dan_a
    ok_concat = (dap_t + dap_a) + margin < (dan_t + dan_a)

    classes = np.array([t.negative_class for t in triplets])
    by_class = {}
    for cls in sorted(set(classes)):
        mask = classes == cls
        by_class[cls] = {
            "n": int(mask.sum()),
            "text": float(ok_text[mask].mean()),
            "audio": float(ok_audio[mask].mean()),
            "concat": float(ok_concat[mask].mean()),
        }
    return SatisfactionReport(
        n=len(triplets),
        margin=margin,
        text=float(ok_text.mean()),
        audio=float(ok_audio.mean()),
        concat=float(ok_concat.mean()),
        by_class=by_class,
    )


@dataclass
class SensitivityReport:
    mean_positive_distance: float
    mean_fake_distance: float
    gap: float
    gap_ci_low: float
    gap_ci_high: float
    nearest_real_accuracy: float
    n_targets: int
    n_fakes: int
    n_bootstrap: int
    seed: int

    def to_dict(self) -> dict:
        return {
            "mean_positive_distance": self.mean_positive_distance,
            "mean_fake_distance": self.mean_fake_distance,
            "gap": self.gap,
            "gap_ci_low": self.gap_ci_low,
            "gap_ci_high": self.gap_ci_high,
            "nearest_real_accuracy": self.nearest_real_accuracy,
            "n_targets": self.n_targets,
            "n_fakes": self.n_fakes,
            "n_bootstrap": self.n_bootstrap,
            "seed": self.seed,
        }


def context_sensitivity(
    corpus,
    features: FeatureSet,
    params_text: EncoderParams,
    params_audio: EncoderParams,
    n_fakes: int = 8,
    seed: int = 0,
    i_max: int = 5,
    n_bootstrap: int = 1000,
) -> SensitivityReport:
    """Real-versus-fake distances on concatenated context vectors.

    For every target with at least two history lengths: the anchor encodes
    the true history, one positive encodes the same history at another
    length, and n_fakes windows come from unrelated conversations. The gap is
    mean fake distance minus positive distance, averaged over targets, with a
    percentile bootstrap interval over targets.
    """
    if n_fakes < 1:
        raise MetricError("n_fakes must be at least 1")
    sampler = TripletSampler(corpus, i_max)
    rng = stream_rng(seed, STREAM_SENSITIVITY)

    anchors, positives, fakes = [], [], []
    for conv in corpus.conversations:
        for t in range(2, len(conv.utterances)):
            anchor = make_context(conv, t, min(i_max, t))
            anchors.append(anchor)
            positives.append(sample_positive(conv, anchor, i_max, rng))
            fakes.extend(sampler.sample_unrelated(anchor, rng) for _ in range(n_fakes))
    if not anchors:
        raise MetricError("corpus has no targets with index >= 2")
    n = len(anchors)

    def distances(params, modality):
        out = encode_windows(anchors + positives + fakes, features, params, modality)
        va, vp, vf = out[:n], out[n : 2 * n], out[2 * n :].reshape(n, n_fakes, -1)
        d_pos = np.sum((va - vp) ** 2, axis=1)
        d_fake = np.sum((va[:, None, :] - vf) ** 2, axis=2)
        return d_pos, d_fake

    dp_t, df_t = distances(params_text, "text")
    dp_a, df_a = distances(params_audio, "audio")
    d_pos = dp_t + dp_a
    d_fake = df_t + df_a

    gaps = d_fake.mean(axis=1) - d_pos
    accuracy = float(np.mean(d_pos < d_fake.min(axis=1)))
    boot = np.empty(n_bootstrap)
    for b in range(n_bootstrap):
        idx = rng.integers(n, size=n)
        boot[b] = gaps[idx].mean()
    lo, hi = np.percentile(boot, [2.5, 97.5])
    return SensitivityReport(
        mean_positive_distance=float(d_pos.mean()),
        mean_fake_distance=float(d_fake.mean()),
        gap=float(gaps.mean()),
        gap_ci_low=float(lo),
        gap_ci_high=float(hi),
        nearest_real_accuracy=accuracy,
        n_targets=n,
        n_fakes=n_fakes,
        n_bootstrap=n_bootstrap,
        seed=seed,
    )


# ---------------------------------------------------------------------------
# Projection export
# ---------------------------------------------------------------------------

def project_embeddings(vectors) -> tuple[np.ndarray, np.ndarray]:
    """Mean-centered PCA to 2 components via eigendecomposition.

    Sign convention: each component's largest-magnitude loading is positive.
    Returns (coordinates (n, 2), component variances (2,)).
    """
    x = np.asarray(vectors, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] < 2:
        raise MetricError("need at least 2 vectors to project")
    if x.shape[1] < 2:
        raise MetricError("need at least 2 dimensions to project")
    centered = x - x.mean(axis=0)
    cov = centered.T @ centered / x.shape[0]
    eigvals, eigvecs = np.linalg.eigh(cov)
    components = eigvecs[:, ::-1][:, :2].copy()
    variances = eigvals[::-1][:2].copy()
    for k in range(2):
        pivot = np.argmax(np.abs(components[:, k]))
        if components[pivot, k] < 0:
            components[:, k] = -components[:, k]
    return centered @ components, variances
