"""Conversational corpus model, manifest I/O, synthetic generation, splitting.

A corpus is a set of conversations; each conversation is an ordered list of
utterances, each spoken by one speaker and backed by a WAV file. Synthetic
corpora additionally carry a latent topic label per conversation. The topic is
an evaluation oracle only: it is stored in the manifest for checking sampled
triplets and fake contexts, and must never reach an encoder input.

Manifest format (UTF-8 JSON lines, one utterance per line):

    {"conversation_id": ..., "index": ..., "speaker_id": ..., "text": ...,
     "audio_ref": ..., "latent_topic": ...}

``text`` is a single string of whitespace-separated tokens; ``latent_topic``
is optional. A sidecar file (default: manifest path with suffix replaced by
``.speakers.txt``) lists one speaker id per line.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .errors import CorpusError, ManifestError
from .features import write_wav
from .util import STREAM_SPLIT

MANIFEST_KEYS = ("conversation_id", "index", "speaker_id", "text", "audio_ref")


@dataclass(frozen=True)
class Speaker:
    id: str


@dataclass(frozen=True)
class Utterance:
    conversation_id: str
    index: int
    speaker_id: str
    tokens: tuple[str, ...]
    audio_ref: str

    @property
    def text(self) -> str:
        return " ".join(self.tokens)


@dataclass(frozen=True)
class Conversation:
    id: str
    utterances: tuple[Utterance, ...]
    latent_topic: int | None = None

    def __len__(self) -> int:
        return len(self.utterances)


@dataclass
class Corpus:
    conversations: tuple[Conversation, ...]
    speakers: tuple[str, ...]
    root: Path | None = None  # directory audio_ref paths are relative to

    def conversation(self, conv_id: str) -> Conversation:
        for conv in self.conversations:
            if conv.id == conv_id:
                return conv
        raise CorpusError(f"unknown conversation id {conv_id!r}")

    def audio_path(self, utt: Utterance) -> Path:
        if self.root is None:
            return Path(utt.audio_ref)
        return self.root / utt.audio_ref

    @property
    def n_utterances(self) -> int:
        return sum(len(c) for c in self.conversations)

    def has_topics(self) -> bool:
        return all(c.latent_topic is not None for c in self.conversations)


def validate(corpus: Corpus, check_audio: bool = True) -> None:
    """Check all corpus invariants, raising CorpusError on the first failure."""
    if not corpus.conversations:
        raise CorpusError("no conversations")
    if len(set(corpus.speakers)) != len(corpus.speakers):
        raise CorpusError("duplicate speaker id in speaker table")
    if any(not s for s in corpus.speakers):
        raise CorpusError("empty speaker id in speaker table")
    speaker_set = set(corpus.speakers)
    seen_conv: set[str] = set()
    for conv in corpus.conversations:
        if conv.id in seen_conv:
            raise CorpusError(f"duplicate conversation id {conv.id!r}")
        seen_conv.add(conv.id)
        if len(conv.utterances) < 2:
            raise CorpusError(f"conversation {conv.id!r} has fewer than 2 utterances")
        for pos, utt in enumerate(conv.utterances):
            if utt.index != pos:
                raise CorpusError(
                    f"conversation {conv.id!r}: non-contiguous index {utt.index} at position {pos}"
                )
            if utt.conversation_id != conv.id:
                raise CorpusError(f"utterance in {conv.id!r} carries wrong conversation id")
            if not utt.tokens:
                raise CorpusError(f"conversation {conv.id!r} utterance {utt.index}: empty text")
            if utt.speaker_id not in speaker_set:
                raise CorpusError(
                    f"conversation {conv.id!r} utterance {utt.index}: unknown speaker {utt.speaker_id!r}"
                )
            if check_audio and not corpus.audio_path(utt).is_file():
                raise CorpusError(
                    f"conversation {conv.id!r} utterance {utt.index}: "
                    f"dangling audio_ref {utt.audio_ref!r}"
                )


def default_speakers_path(manifest_path: Path) -> Path:
    return manifest_path.with_suffix(".speakers.txt")


def load_manifest(path, speakers_path=None, check_audio: bool = True) -> Corpus:
    """Load and validate a JSON-lines manifest plus its speaker sidecar."""
    path = Path(path)
    if not path.is_file():
        raise ManifestError(f"manifest not found: {path}")
    speakers_path = Path(speakers_path) if speakers_path else default_speakers_path(path)
    if not speakers_path.is_file():
        raise ManifestError(f"speakers sidecar not found: {speakers_path}")
    speakers = tuple(
        line.strip() for line in speakers_path.read_text(encoding="utf-8").splitlines() if line.strip()
    )

    records: dict[str, dict[int, Utterance]] = {}
    topics: dict[str, int | None] = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ManifestError(f"line {lineno}: malformed JSON ({exc.msg})") from exc
            if not isinstance(rec, dict):
                raise ManifestError(f"line {lineno}: record is not an object")
            missing = [k for k in MANIFEST_KEYS if k not in rec]
            if missing:
                raise ManifestError(f"line {lineno}: missing keys {missing}")
            conv_id = rec["conversation_id"]
            index = rec["index"]
            if not isinstance(index, int) or index < 0:
                raise ManifestError(f"line {lineno}: index must be a non-negative integer")
            tokens = tuple(str(rec["text"]).split())
            if not tokens:
                raise ManifestError(f"line {lineno}: empty text")
            utt = Utterance(
                conversation_id=str(conv_id),
                index=index,
                speaker_id=str(rec["speaker_id"]),
                tokens=tokens,
                audio_ref=str(rec["audio_ref"]),
            )
            per_conv = records.setdefault(utt.conversation_id, {})
            if index in per_conv:
                raise ManifestError(
                    f"line {lineno}: duplicate (conversation, index) "
                    f"({utt.conversation_id!r}, {index})"
                )
            per_conv[index] = utt
            topic = rec.get("latent_topic")
            if topic is not None and not isinstance(topic, int):
                raise ManifestError(f"line {lineno}: latent_topic must be an integer")
            if utt.conversation_id in topics and topics[utt.conversation_id] != topic:
                raise ManifestError(
                    f"line {lineno}: conflicting latent_topic within {utt.conversation_id!r}"
                )
            topics[utt.conversation_id] = topic

    if not records:
        raise ManifestError("no conversations in manifest")

    conversations = []
    for conv_id in sorted(records):
        per_conv = records[conv_id]
        expected = list(range(len(per_conv)))
        if sorted(per_conv) != expected:
            raise ManifestError(f"conversation {conv_id!r}: non-contiguous index set {sorted(per_conv)}")
        utts = tuple(per_conv[i] for i in expected)
        conversations.append(Conversation(id=conv_id, utterances=utts, latent_topic=topics[conv_id]))

    corpus = Corpus(conversations=tuple(conversations), speakers=speakers, root=path.parent)
    validate(corpus, check_audio=check_audio)
    return corpus


def save_manifest(corpus: Corpus, path, speakers_path=None) -> None:
    """Write the manifest and speaker sidecar; inverse of load_manifest."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    speakers_path = Path(speakers_path) if speakers_path else default_speakers_path(path)
    with open(path, "w", encoding="utf-8") as fh:
        for conv in sorted(corpus.conversations, key=lambda c: c.id):
            for utt in conv.utterances:
                rec = {
                    "conversation_id": utt.conversation_id,
                    "index": utt.index,
                    "speaker_id": utt.speaker_id,
                    "text": utt.text,
                    "audio_ref": utt.audio_ref,
                }
                if conv.latent_topic is not None:
                    rec["latent_topic"] = conv.latent_topic
                fh.write(json.dumps(rec, sort_keys=True) + "\n")
    with open(speakers_path, "w", encoding="utf-8") as fh:
        for spk in corpus.speakers:
            fh.write(spk + "\n")


# ---------------------------------------------------------------------------
# Synthetic corpus generation
# ---------------------------------------------------------------------------

@dataclass
class SynthConfig:
    """Knobs for the synthetic conversational corpus.

    Audio per utterance is a harmonic tone: fundamental at
    ``base_f0(topic, speaker)`` with two overtones 6 dB and 12 dB down,
    10 ms raised-cosine fades, and a topic-dependent tremolo envelope.
    Token vocabularies are disjoint across topics, so topic identity is
    recoverable from text and (through the fundamental) from audio.
    """

    n_conversations: int = 40
    utterances_range: tuple[int, int] = (6, 10)
    n_speakers: int = 8
    n_topics: int = 4
    sample_rate: int = 16000
    duration_range: tuple[float, float] = (0.55, 0.65)
    tokens_range: tuple[int, int] = (3, 7)
    vocab_per_topic: int = 600
    speakers_per_conversation: tuple[int, int] = (2, 4)
    f0_jitter: float = 0.03  # bounded relative perturbation of the fundamental
    base_f0: np.ndarray | None = None  # (n_topics, n_speakers) Hz; default table if None

    def resolved_f0_table(self) -> np.ndarray:
        if self.base_f0 is not None:
            table = np.asarray(self.base_f0, dtype=float)
            if table.shape != (self.n_topics, self.n_speakers):
                raise CorpusError(
                    f"base_f0 table shape {table.shape} does not match "
                    f"(n_topics, n_speakers) = ({self.n_topics}, {self.n_speakers})"
                )
            return table
        # Speaker levels are shuffled per topic before the topic factor is
        # applied, so a raw F0 value alone does not identify the topic; the
        # (speaker, F0) pair does. Spreads keep every fundamental inside the
        # default pitch-tracker range [70, 400] Hz with 3% jitter room.
        levels = np.geomspace(92.5, 195.0, self.n_speakers)
        factors = np.geomspace(0.80, 2.00, self.n_topics)
        table = np.zeros((self.n_topics, self.n_speakers))
        for z in range(self.n_topics):
            for s in range(self.n_speakers):
                table[z, s] = levels[(s + 3 * z) % self.n_speakers] * factors[z]
        return table

    def to_dict(self) -> dict:
        d = {
            "n_conversations": self.n_conversations,
            "utterances_range": list(self.utterances_range),
            "n_speakers": self.n_speakers,
            "n_topics": self.n_topics,
            "sample_rate": self.sample_rate,
            "duration_range": list(self.duration_range),
            "tokens_range": list(self.tokens_range),
            "vocab_per_topic": self.vocab_per_topic,
            "speakers_per_conversation": list(self.speakers_per_conversation),
            "f0_jitter": self.f0_jitter,
        }
        if self.base_f0 is not None:
            d["base_f0"] = np.asarray(self.base_f0).tolist()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SynthConfig":
        kwargs = dict(d)
        for key in ("utterances_range", "duration_range", "tokens_range", "speakers_per_conversation"):
            if key in kwargs:
                kwargs[key] = tuple(kwargs[key])
        if kwargs.get("base_f0") is not None:
            kwargs["base_f0"] = np.asarray(kwargs["base_f0"], dtype=float)
        return cls(**kwargs)


# Tremolo rate/depth per topic; mild enough that mean RMS barely moves, so the
# topic cue in energy lives mostly in its variance.
def _tremolo_params(topic: int) -> tuple[float, float]:
    rate = 2.5 + 1.5 * topic
    depth = 0.06 + 0.05 * topic
    return rate, depth


def synth_utterance_audio(
    f0: float, duration: float, sample_rate: int, topic: int, amplitude: float, phase: float
) -> np.ndarray:
    """Harmonic tone with overtones at -6/-12 dB, tremolo, and 10 ms fades."""
    n = max(int(round(duration * sample_rate)), 1)
    t = np.arange(n) / sample_rate
    wave = (
        np.sin(2 * np.pi * f0 * t)
        + 10 ** (-6 / 20) * np.sin(2 * np.pi * 2 * f0 * t)
        + 10 ** (-12 / 20) * np.sin(2 * np.pi * 3 * f0 * t)
    )
    rate, depth = _tremolo_params(topic)
    envelope = 1.0 + depth * np.sin(2 * np.pi * rate * t + phase)
    samples = amplitude * envelope * wave
    fade = min(int(round(0.010 * sample_rate)), n // 2)
    if fade > 0:
        ramp = 0.5 * (1 - np.cos(np.pi * np.arange(fade) / fade))
        samples[:fade] *= ramp
        samples[-fade:] *= ramp[::-1]
    return samples


def generate_synthetic(cfg: SynthConfig, seed: int, out_dir) -> Corpus:
    """Write a synthetic corpus (manifest, speaker sidecar, WAVs) under out_dir.

    Output bytes are a pure function of (cfg, seed): a single RNG is consumed
    in a fixed order, and all file writes are deterministic.
    """
    if cfg.n_topics < 2:
        raise CorpusError("n_topics must be at least 2 (negatives need a second topic)")
    if cfg.n_speakers < 2:
        raise CorpusError("n_speakers must be at least 2 (hard negatives need shared speakers)")
    lo_u, hi_u = cfg.utterances_range
    if lo_u < 2:
        raise CorpusError("conversations need at least 2 utterances")

    out_dir = Path(out_dir)
    (out_dir / "wav").mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    f0_table = cfg.resolved_f0_table()
    speakers = tuple(f"spk{i:02d}" for i in range(cfg.n_speakers))
    vocab = [
        [f"t{z}w{j:02d}" for j in range(cfg.vocab_per_topic)] for z in range(cfg.n_topics)
    ]

    conversations = []
    for ci in range(cfg.n_conversations):
        conv_id = f"c{ci:03d}"
        topic = int(rng.integers(cfg.n_topics))
        n_utts = int(rng.integers(lo_u, hi_u + 1))
        lo_s, hi_s = cfg.speakers_per_conversation
        n_conv_spk = int(rng.integers(lo_s, min(hi_s, cfg.n_speakers) + 1))
        conv_speakers = rng.choice(cfg.n_speakers, size=n_conv_spk, replace=False)
        utts = []
        for ui in range(n_utts):
            spk_idx = int(conv_speakers[int(rng.integers(n_conv_spk))])
            n_tokens = int(rng.integers(cfg.tokens_range[0], cfg.tokens_range[1] + 1))
            tokens = tuple(vocab[topic][int(k)] for k in rng.integers(cfg.vocab_per_topic, size=n_tokens))
            duration = float(rng.uniform(*cfg.duration_range))
            f0 = float(f0_table[topic, spk_idx]) * (1.0 + float(rng.uniform(-cfg.f0_jitter, cfg.f0_jitter)))
            amplitude = float(rng.uniform(0.25, 0.35))
            phase = float(rng.uniform(0.0, 2 * np.pi))
            audio_ref = f"wav/{conv_id}_u{ui:02d}.wav"
            samples = synth_utterance_audio(f0, duration, cfg.sample_rate, topic, amplitude, phase)
            write_wav(out_dir / audio_ref, samples, cfg.sample_rate)
            utts.append(
                Utterance(
                    conversation_id=conv_id,
                    index=ui,
                    speaker_id=speakers[spk_idx],
                    tokens=tokens,
                    audio_ref=audio_ref,
                )
            )
        conversations.append(Conversation(id=conv_id, utterances=tuple(utts), latent_topic=topic))

    corpus = Corpus(conversations=tuple(conversations), speakers=speakers, root=out_dir)
    save_manifest(corpus, out_dir / "manifest.jsonl")
    validate(corpus)
    return corpus


# ---------------------------------------------------------------------------
# Splitting
# ---------------------------------------------------------------------------

def split(corpus: Corpus, ratios: tuple[float, float, float], seed: int) -> tuple[Corpus, Corpus, Corpus]:
    """Partition by whole conversation into train/val/test, deterministically."""
    if len(ratios) != 3 or not all(0.0 < r < 1.0 for r in ratios):
        raise CorpusError("ratios must be three fractions in (0, 1)")
    if not math.isclose(sum(ratios), 1.0, abs_tol=1e-9):
        raise CorpusError(f"ratios must sum to 1, got {sum(ratios)}")
    n = len(corpus.conversations)
    if n < 3:
        raise CorpusError("need at least 3 conversations to split")
    counts = [int(round(n * ratios[0])), int(round(n * ratios[1]))]
    counts.append(n - counts[0] - counts[1])
    if any(c < 1 for c in counts):
        raise CorpusError(f"too few conversations ({n}) for non-empty splits at ratios {ratios}")

    order = sorted(range(n), key=lambda i: corpus.conversations[i].id)
    rng = np.random.default_rng(np.random.SeedSequence((seed, STREAM_SPLIT)))
    perm = rng.permutation(n)
    shuffled = [order[i] for i in perm]
    parts = []
    start = 0
    for c in counts:
        chosen = sorted(shuffled[start : start + c])
        parts.append(
            Corpus(
                conversations=tuple(corpus.conversations[i] for i in chosen),
                speakers=corpus.speakers,
                root=corpus.root,
            )
        )
        start += c
    return parts[0], parts[1], parts[2]


def with_root(corpus: Corpus, root) -> Corpus:
    return replace(corpus, root=Path(root))
