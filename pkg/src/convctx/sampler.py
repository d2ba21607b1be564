"""Triplet construction over dialogue history windows.

The pretext pseudo-labels: an anchor is a history window before some target
utterance; its positive is a window for the same target with a different
length; its negative is a window from another conversation. Negatives come in
two classes: inter_speaker (no speaker shared with the anchor window) and
intra_speaker (at least one shared speaker, the hard case, since shared
speakers make the windows superficially similar).

"Unrelated" is operationalized as a different conversation; on synthetic
corpora with latent topics it additionally means a different topic, and every
sampled negative is asserted to honor that.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .corpus import Conversation, Corpus, Utterance
from .errors import SamplingError

INTER_SPEAKER = "inter_speaker"
INTRA_SPEAKER = "intra_speaker"
NEGATIVE_CLASSES = (INTER_SPEAKER, INTRA_SPEAKER)

STRATEGIES = ("S1", "S2", "S3")


@dataclass(frozen=True)
class ContextWindow:
    """The ``length`` utterances immediately preceding ``target_index``."""

    conversation_id: str
    target_index: int
    length: int
    entries: tuple[Utterance, ...]

    def speaker_ids(self) -> frozenset:
        return frozenset(u.speaker_id for u in self.entries)


@dataclass(frozen=True)
class Triplet:
    anchor: ContextWindow
    positive: ContextWindow
    negative: ContextWindow
    negative_class: str


def make_context(conversation: Conversation, target_index: int, length: int) -> ContextWindow:
    """Window of min(length, target_index) utterances ending just before the target."""
    if target_index == 0:
        raise SamplingError(f"target 0 in {conversation.id!r} has no history")
    if not 0 < target_index < len(conversation.utterances):
        raise SamplingError(
            f"target {target_index} out of range for conversation {conversation.id!r}"
        )
    if length < 1:
        raise SamplingError("context length must be at least 1")
    length = min(length, target_index)
    entries = conversation.utterances[target_index - length : target_index]
    return ContextWindow(
        conversation_id=conversation.id,
        target_index=target_index,
        length=length,
        entries=entries,
    )


def sample_positive(
    conversation: Conversation, anchor: ContextWindow, i_max: int, rng: np.random.Generator
) -> ContextWindow:
    """Same conversation and target as the anchor, uniformly drawn other length."""
    limit = min(i_max, anchor.target_index)
    lengths = [l for l in range(1, limit + 1) if l != anchor.length]
    if not lengths:
        raise SamplingError(
            f"no alternative context length for target {anchor.target_index} "
            f"in {anchor.conversation_id!r}"
        )
    length = lengths[int(rng.integers(len(lengths)))]
    return make_context(conversation, anchor.target_index, length)


class TripletSampler:
    """Precomputed window candidates over one corpus.

    Candidates enumerate every (conversation, target >= 1, length <= min
    (i_max, target)) window in corpus order. Eligibility filters are
    vectorized over boolean speaker-membership rows.
    """

    def __init__(self, corpus: Corpus, i_max: int = 5):
        if i_max < 1:
            raise SamplingError("i_max must be at least 1")
        self.corpus = corpus
        self.i_max = i_max
        self._spk_index = {s: k for k, s in enumerate(corpus.speakers)}
        self._topics = [c.latent_topic for c in corpus.conversations]
        self._use_topics = corpus.has_topics()

        keys = []  # (conv_pos, target, length)
        for ci, conv in enumerate(corpus.conversations):
            for t in range(1, len(conv.utterances)):
                for l in range(1, min(i_max, t) + 1):
                    keys.append((ci, t, l))
        if not keys:
            raise SamplingError("corpus has no valid context windows")
        self.keys = keys
        self.index = {k: i for i, k in enumerate(keys)}
        self._conv_of = np.array([k[0] for k in keys])
        self._target_of = np.array([k[1] for k in keys])
        self._topic_of = np.array(
            [self._topics[k[0]] if self._use_topics else -1 for k in keys]
        )
        masks = np.zeros((len(keys), len(corpus.speakers)), dtype=bool)
        for i, (ci, t, l) in enumerate(keys):
            for utt in corpus.conversations[ci].utterances[t - l : t]:
                masks[i, self._spk_index[utt.speaker_id]] = True
        self._spk_mask = masks
        # Anchors need a positive, hence a second available length: target >= 2.
        self._anchor_rows = np.flatnonzero(self._target_of >= 2)
        if len(self._anchor_rows) == 0:
            raise SamplingError("corpus has no anchor candidates (all targets < 2)")

    def conv_pos(self, conv_id: str) -> int:
        for ci, conv in enumerate(self.corpus.conversations):
            if conv.id == conv_id:
                return ci
        raise SamplingError(f"unknown conversation {conv_id!r}")

    def window_at(self, row: int) -> ContextWindow:
        ci, t, l = self.keys[row]
        return make_context(self.corpus.conversations[ci], t, l)

    def row_of(self, window: ContextWindow) -> int:
        key = (self.conv_pos(window.conversation_id), window.target_index, window.length)
        try:
            return self.index[key]
        except KeyError:
            raise SamplingError(f"window {key} not indexed (length above i_max?)") from None

    def _anchor_mask_row(self, anchor: ContextWindow) -> np.ndarray:
        mask = np.zeros(len(self.corpus.speakers), dtype=bool)
        for s in anchor.speaker_ids():
            idx = self._spk_index.get(s)
            if idx is None:
                raise SamplingError(f"anchor speaker {s!r} missing from corpus table")
            mask[idx] = True
        return mask

    def _unrelated_rows(self, anchor: ContextWindow) -> np.ndarray:
        anchor_conv = self.conv_pos(anchor.conversation_id)
        eligible = self._conv_of != anchor_conv
        if self._use_topics:
            eligible &= self._topic_of != self._topics[anchor_conv]
        return eligible

    def sample_negative(
        self, anchor: ContextWindow, negative_class: str, rng: np.random.Generator
    ) -> ContextWindow:
        """Uniform draw over eligible (conversation, target, length) windows."""
        if negative_class not in NEGATIVE_CLASSES:
            raise SamplingError(f"unknown negative class {negative_class!r}")
        eligible = self._unrelated_rows(anchor)
        overlap = (self._spk_mask & self._anchor_mask_row(anchor)).any(axis=1)
        eligible &= overlap if negative_class == INTRA_SPEAKER else ~overlap
        rows = np.flatnonzero(eligible)
        if len(rows) == 0:
            raise SamplingError(
                f"no eligible negative of class {negative_class} for anchor "
                f"({anchor.conversation_id!r}, target {anchor.target_index})"
            )
        window = self.window_at(int(rows[int(rng.integers(len(rows)))]))
        self._assert_unrelated(anchor, window)
        return window

    def sample_unrelated(self, anchor: ContextWindow, rng: np.random.Generator) -> ContextWindow:
        """A fake context: any window from an unrelated conversation."""
        rows = np.flatnonzero(self._unrelated_rows(anchor))
        if len(rows) == 0:
            raise SamplingError(
                f"no unrelated conversation for anchor in {anchor.conversation_id!r}"
            )
        window = self.window_at(int(rows[int(rng.integers(len(rows)))]))
        self._assert_unrelated(anchor, window)
        return window

    def _assert_unrelated(self, anchor: ContextWindow, other: ContextWindow) -> None:
        assert other.conversation_id != anchor.conversation_id
        if self._use_topics:
            a = self._topics[self.conv_pos(anchor.conversation_id)]
            b = self._topics[self.conv_pos(other.conversation_id)]
            assert a != b, "sampled negative shares the anchor's latent topic"

    def sample_anchor(self, rng: np.random.Generator) -> ContextWindow:
        row = self._anchor_rows[int(rng.integers(len(self._anchor_rows)))]
        return self.window_at(int(row))

    def build_batch(
        self,
        batch_size: int,
        strategy: str,
        rng: np.random.Generator,
        check: bool = True,
    ) -> list[Triplet]:
        """Sample a batch of triplets.

        S1 and S2 use inter-speaker negatives only; S3 alternates
        inter/intra (an even batch splits exactly 50/50). Anchors are
        uniform over windows valid for the class required at each slot:
        an anchor without an eligible negative of that class is redrawn
        (rejection keeps the draw uniform over the valid set).
        """
        if batch_size < 1:
            raise SamplingError("batch_size must be at least 1")
        if strategy not in STRATEGIES:
            raise SamplingError(f"unknown strategy {strategy!r}")
        triplets = []
        for k in range(batch_size):
            if strategy == "S3":
                cls = INTER_SPEAKER if k % 2 == 0 else INTRA_SPEAKER
            else:
                cls = INTER_SPEAKER
            triplet = None
            for _ in range(200):
                anchor = self.sample_anchor(rng)
                try:
                    negative = self.sample_negative(anchor, cls, rng)
                except SamplingError:
                    continue
                conv = self.corpus.conversations[self.conv_pos(anchor.conversation_id)]
                positive = sample_positive(conv, anchor, self.i_max, rng)
                triplet = Triplet(anchor=anchor, positive=positive, negative=negative, negative_class=cls)
                break
            if triplet is None:
                raise SamplingError(
                    f"no anchor with an eligible {cls} negative after 200 draws"
                )
            if check:
                check_triplet(triplet)
            triplets.append(triplet)
        return triplets


def sample_negative(
    anchor: ContextWindow, corpus: Corpus, negative_class: str, rng: np.random.Generator, i_max: int = 5
) -> ContextWindow:
    """One-shot form of TripletSampler.sample_negative for small corpora."""
    return TripletSampler(corpus, i_max).sample_negative(anchor, negative_class, rng)


def build_batch(
    corpus: Corpus, batch_size: int, strategy: str, i_max: int, rng: np.random.Generator
) -> list[Triplet]:
    """One-shot form of TripletSampler.build_batch."""
    return TripletSampler(corpus, i_max).build_batch(batch_size, strategy, rng)


def check_triplet(t: Triplet) -> None:
    """Assert every structural triplet invariant; raises AssertionError."""
    assert t.positive.conversation_id == t.anchor.conversation_id
    assert t.positive.target_index == t.anchor.target_index
    assert t.positive.length != t.anchor.length
    assert t.negative.conversation_id != t.anchor.conversation_id
    shared = t.anchor.speaker_ids() & t.negative.speaker_ids()
    if t.negative_class == INTRA_SPEAKER:
        assert shared, "intra_speaker negative shares no speaker with the anchor"
    else:
        assert not shared, "inter_speaker negative shares a speaker with the anchor"
    for window in (t.anchor, t.positive, t.negative):
        assert 1 <= window.length <= window.target_index
        assert len(window.entries) == window.length
        expected = range(window.target_index - window.length, window.target_index)
        assert [u.index for u in window.entries] == list(expected)


# ---------------------------------------------------------------------------
# Audit dump
# ---------------------------------------------------------------------------

def _window_descriptor(w: ContextWindow) -> dict:
    return {
        "conversation_id": w.conversation_id,
        "target_index": w.target_index,
        "length": w.length,
    }


def dump_triplets(triplets, path) -> None:
    """JSON-lines audit dump of triplet descriptors."""
    import json

    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        for t in triplets:
            fh.write(
                json.dumps(
                    {
                        "anchor": _window_descriptor(t.anchor),
                        "positive": _window_descriptor(t.positive),
                        "negative": _window_descriptor(t.negative),
                        "negative_class": t.negative_class,
                    },
                    sort_keys=True,
                )
                + "\n"
            )


def load_triplet_dump(corpus: Corpus, path) -> list[Triplet]:
    """Rebuild triplets from an audit dump against the same corpus."""
    import json

    by_id = {c.id: c for c in corpus.conversations}

    def rebuild(desc: dict) -> ContextWindow:
        conv = by_id.get(desc["conversation_id"])
        if conv is None:
            raise SamplingError(f"dump references unknown conversation {desc['conversation_id']!r}")
        return make_context(conv, desc["target_index"], desc["length"])

    triplets = []
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        rec = json.loads(line)
        triplets.append(
            Triplet(
                anchor=rebuild(rec["anchor"]),
                positive=rebuild(rec["positive"]),
                negative=rebuild(rec["negative"]),
                negative_class=rec["negative_class"],
            )
        )
    return triplets
