import pytest

from convctx.corpus import Conversation, Corpus, SynthConfig, Utterance, generate_synthetic
from convctx.features import FeatureSet, FrameParams, featurize_corpus


@pytest.fixture(scope="session")
def small_setup(tmp_path_factory):
    """A small synthetic corpus with cached features, shared across modules."""
    out = tmp_path_factory.mktemp("small_corpus")
    cfg = SynthConfig(
        n_conversations=10,
        utterances_range=(4, 7),
        n_speakers=4,
        n_topics=3,
        vocab_per_topic=50,
        duration_range=(0.30, 0.45),
    )
    corpus = generate_synthetic(cfg, seed=7, out_dir=out)
    features = featurize_corpus(corpus, FrameParams(), hash_dim=256, out_dir=out)
    return corpus, features, out, cfg


def toy_corpus(conv_specs, speakers):
    """Hand-built corpus without audio: conv_specs is a list of
    (conv_id, [(speaker_id, text), ...], topic_or_None)."""
    conversations = []
    for conv_id, utts, topic in conv_specs:
        conversations.append(
            Conversation(
                id=conv_id,
                utterances=tuple(
                    Utterance(
                        conversation_id=conv_id,
                        index=i,
                        speaker_id=spk,
                        tokens=tuple(text.split()),
                        audio_ref=f"{conv_id}_{i}.wav",
                    )
                    for i, (spk, text) in enumerate(utts)
                ),
                latent_topic=topic,
            )
        )
    return Corpus(conversations=tuple(conversations), speakers=tuple(speakers))


def toy_features(corpus, rng, text_dim=16):
    """Random but deterministic features for every utterance of a toy corpus."""
    fs = FeatureSet(hash_dim=text_dim)
    for conv in corpus.conversations:
        for utt in conv.utterances:
            key = (utt.conversation_id, utt.index)
            fs.text[key] = rng.normal(size=text_dim)
            fs.prosody[key] = rng.normal(size=6)
    return fs
