"""Train the two context encoders with the three contrastive strategies.

S1 is the classic pairwise contrastive loss, S2 the margin triplet loss with
inter-speaker negatives only, S3 adds hard (shared-speaker) negatives. The
score to watch is margin satisfaction on held-out conversations: the
fraction of triplets whose positive sits at least one margin closer than the
negative. The interesting column is the intra-speaker one, where S2's
speaker shortcut stops working.

Run:  python demos/04_contrastive_training.py
"""

from pathlib import Path

import numpy as np

from convctx.corpus import SynthConfig, generate_synthetic, split
from convctx.encoder import load_checkpoint
from convctx.features import FrameParams, featurize_corpus
from convctx.metrics import triplet_satisfaction
from convctx.sampler import TripletSampler
from convctx.training import LossConfig, init_encoder_pair, train
from convctx.util import STREAM_EVAL, stream_rng

OUT = Path(__file__).parent / "out" / "04_training"
STEPS = 800  # enough to see clear separation; the full runs use 2000


def main():
    corpus = generate_synthetic(SynthConfig(n_conversations=24), seed=7, out_dir=OUT / "corpus")
    features = featurize_corpus(corpus, FrameParams(), hash_dim=1024, out_dir=OUT / "corpus")
    train_c, val_c, test_c = split(corpus, (0.7, 0.15, 0.15), seed=7)
    triplets = TripletSampler(test_c, 5).build_batch(400, "S3", stream_rng(99, STREAM_EVAL))

    init_text, init_audio = init_encoder_pair(11, features.hash_dim)
    base = triplet_satisfaction(triplets, init_text, init_audio, features, margin=1.0)
    print(f"untrained encoders: satisfaction {base.concat:.3f} "
          f"(margin 1.0 dwarfs the initial embedding scale)\n")

    curves = {}
    for strategy in ("S1", "S2", "S3"):
        cfg = LossConfig(strategy=strategy, steps=STEPS, eval_every=200, eval_triplets=200)
        report = train(train_c, features, cfg, seed=11, out_dir=OUT / strategy, holdout_corpus=val_c)
        params_text, params_audio, _, _ = load_checkpoint(OUT / strategy / "checkpoint.ckpt")
        sat = triplet_satisfaction(triplets, params_text, params_audio, features, margin=1.0)
        curves[strategy] = report.losses_total
        intra = sat.by_class.get("intra_speaker", {"concat": float("nan")})["concat"]
        inter = sat.by_class.get("inter_speaker", {"concat": float("nan")})["concat"]
        print(f"{strategy}: final loss {report.losses_total[-1]:.4f}, test satisfaction "
              f"concat={sat.concat:.3f} inter={inter:.3f} intra={intra:.3f}")

    try:
        import matplotlib

        matplotlib.use("Agg")
        import matplotlib.pyplot as plt

        fig, ax = plt.subplots(figsize=(7, 4))
        for strategy, losses in curves.items():
            smooth = np.convolve(losses, np.ones(25) / 25, mode="valid")
            ax.plot(smooth, label=strategy)
        ax.set_xlabel("step")
        ax.set_ylabel("batch loss (25-step mean)")
        ax.legend()
        fig.tight_layout()
        fig.savefig(OUT / "loss_curves.png", dpi=120)
        print(f"\nloss curves saved to {OUT / 'loss_curves.png'}")
    except ImportError:
        print("\nmatplotlib not installed; skipping the loss-curve plot")


if __name__ == "__main__":
    main()
