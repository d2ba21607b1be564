"""Predict the next utterance's prosody from context vectors and history.

The attention head queries the history's prosody summaries with the
concatenated text+audio context vector and regresses the target's summary
(teacher forcing; encoders frozen). Swapping the true history for one from
an unrelated conversation should visibly hurt the predictions; that
real-versus-fake gap is the downstream sign of context sensitivity.

Run:  python demos/05_prosody_prediction.py
"""

from pathlib import Path

import numpy as np

from convctx.corpus import SynthConfig, generate_synthetic, split
from convctx.encoder import load_checkpoint
from convctx.features import FrameParams, featurize_corpus
from convctx.prosody import ApmConfig, eval_apm, predict_lpv_detailed, train_apm
from convctx.training import LossConfig, train

OUT = Path(__file__).parent / "out" / "05_prosody"


def main():
    corpus = generate_synthetic(SynthConfig(n_conversations=24), seed=7, out_dir=OUT / "corpus")
    features = featurize_corpus(corpus, FrameParams(), hash_dim=1024, out_dir=OUT / "corpus")
    train_c, val_c, test_c = split(corpus, (0.7, 0.15, 0.15), seed=7)

    print("training S3 encoders (frozen afterwards) ...")
    train(train_c, features, LossConfig(steps=800, eval_every=400, eval_triplets=100),
          seed=11, out_dir=OUT / "enc", holdout_corpus=val_c)
    params_text, params_audio, _, _ = load_checkpoint(OUT / "enc" / "checkpoint.ckpt")

    cfg = ApmConfig(steps=1500)
    apm, report = train_apm(train_c, features, params_text, params_audio, cfg, seed=21,
                            holdout_corpus=test_c)
    print(f"prosody head: train MSE {report['final_train_mse']:.4f}, "
          f"held-out MSE {report['holdout_mse']:.4f} over {report['n_holdout_examples']} targets")

    real = eval_apm(test_c, features, params_text, params_audio, apm, "real", seed=31, i_max=cfg.i_max)
    fake = eval_apm(test_c, features, params_text, params_audio, apm, "fake", seed=31, i_max=cfg.i_max)
    print("\nper-dimension RMSE, true history vs substituted history:")
    for k, name in enumerate(real["dimension_order"]):
        print(f"  {name:>12s}: real {real['per_dimension_rmse'][k]:.4f}   "
              f"fake {fake['per_dimension_rmse'][k]:.4f}")
    print(f"  {'mean':>12s}: real {real['mean_rmse']:.4f}   fake {fake['mean_rmse']:.4f}")
    print("fake context degrades prediction, most visibly on mean log-F0.")

    # Peek at the attention weights for one target.
    from convctx.prosody import build_dataset

    example = build_dataset(test_c, features, params_text, params_audio, cfg.i_max)[3]
    pred, weights = predict_lpv_detailed(example.ctx_vec, example.lpvs, apm)
    print(f"\nexample {example.conversation_id}#{example.target_index}: "
          f"attention over {len(weights)} history turns = {np.round(weights, 3)}")
    print(f"  predicted mean log-F0 {pred[0]:.3f}, true {example.target[0]:.3f}")


if __name__ == "__main__":
    main()
