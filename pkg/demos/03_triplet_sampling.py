"""The pretext pseudo-labels: anchor, positive, and negative history windows.

A positive is the same target's history at another length; a negative comes
from an unrelated conversation. Hard negatives additionally share a speaker
with the anchor window, which makes them superficially similar and forces
the encoder to attend to content rather than voices.

Run:  python demos/03_triplet_sampling.py
"""

from pathlib import Path

import numpy as np

from convctx.corpus import SynthConfig, generate_synthetic
from convctx.sampler import TripletSampler, dump_triplets

OUT = Path(__file__).parent / "out" / "03_sampling"


def describe(window, corpus):
    topic = corpus.conversation(window.conversation_id).latent_topic
    speakers = ",".join(sorted(window.speaker_ids()))
    return (f"{window.conversation_id} target={window.target_index} "
            f"len={window.length} topic={topic} speakers=[{speakers}]")


def main():
    corpus = generate_synthetic(
        SynthConfig(n_conversations=12, utterances_range=(5, 8), n_speakers=6, n_topics=3),
        seed=3,
        out_dir=OUT,
    )
    sampler = TripletSampler(corpus, i_max=5)
    rng = np.random.default_rng(0)

    batch = sampler.build_batch(6, "S3", rng)
    print("one S3 batch (negative classes alternate inter/intra):")
    for k, t in enumerate(batch):
        print(f"\ntriplet {k} [{t.negative_class}]")
        print(f"  anchor   {describe(t.anchor, corpus)}")
        print(f"  positive {describe(t.positive, corpus)}")
        print(f"  negative {describe(t.negative, corpus)}")
        shared = t.anchor.speaker_ids() & t.negative.speaker_ids()
        print(f"  speakers shared with anchor: {sorted(shared) or 'none'}")

    dump = OUT / "triplets.jsonl"
    dump_triplets(batch, dump)
    print(f"\naudit dump written to {dump} (one JSON descriptor per line)")

    counts = {}
    for t in sampler.build_batch(2000, "S3", rng, check=True):
        counts[t.negative_class] = counts.get(t.negative_class, 0) + 1
    print(f"2000 checked triplets, class mix: {counts}")


if __name__ == "__main__":
    main()
