"""Featurization walkthrough: pitch, energy, mel-cepstra, hashed text.

Everything downstream consumes two per-utterance views: the 6-dim prosody
summary (mean/std log-F0, voiced ratio, mean/std energy, duration) and the
L2-normalized hashed unigram+bigram counts.

Run:  python demos/02_signal_features.py
"""

from pathlib import Path

import numpy as np

from convctx.corpus import synth_utterance_audio
from convctx.features import (
    FrameParams,
    compute_frame_track,
    featurize_text,
    read_feature_cache,
    summarize_prosody,
    write_feature_cache,
)

OUT = Path(__file__).parent / "out" / "02_features"


def main():
    OUT.mkdir(parents=True, exist_ok=True)
    params = FrameParams()
    sr = 16000

    truth = 175.0
    samples = synth_utterance_audio(truth, 0.6, sr, topic=1, amplitude=0.3, phase=0.5)
    track = compute_frame_track(samples, sr, params)
    voiced = track.f0[track.f0 > 0]
    print(f"tone at {truth} Hz: {len(track)} frames, "
          f"median tracked F0 {np.median(voiced):.1f} Hz, "
          f"voiced ratio {np.mean(track.f0 > 0):.2f}")
    print(f"energy: mean {track.energy.mean():.3f}, std {track.energy.std():.4f} "
          f"(the std carries the topic-dependent tremolo)")
    print(f"cepstra: {track.cepstra.shape[1]} coefficients per frame; "
          f"c0 tracks level, c1.. describe spectral shape")

    stats = summarize_prosody(track, duration=len(samples) / sr)
    names = ["mean_log_f0", "std_log_f0", "voiced_ratio", "mean_energy", "std_energy", "duration_s"]
    print("\nprosody summary (the per-utterance vector the audio encoder sees):")
    for name, value in zip(names, stats.vector):
        print(f"  {name:>12s} = {value: .4f}")
    print(f"  exp(mean_log_f0) = {np.exp(stats.mean_log_f0):.1f} Hz, truth {truth} Hz")

    cache = OUT / "tone.ccf"
    write_feature_cache(cache, track, sr)
    back, _ = read_feature_cache(cache)
    print(f"\nbinary cache round trip: {cache.stat().st_size} bytes, "
          f"{len(back)} frames preserved")

    a = featurize_text("the quick brown fox".split())
    b = featurize_text("fox brown quick the".split())
    print("\nhashed text features (1024-dim, unigrams + adjacent bigrams):")
    print(f"  nonzero slots: {np.count_nonzero(a.vector)}, L2 norm {np.linalg.norm(a.vector):.1f}")
    print(f"  cosine between the same words in different orders: "
          f"{float(a.vector @ b.vector):.3f} (< 1 because bigrams differ)")


if __name__ == "__main__":
    main()
