"""Signal and text featurization.

Frame-level analysis (F0 by normalized autocorrelation, RMS energy,
mel-cepstra) feeds two consumers: the objective metrics (cepstral distortion
and log-F0 error over an aligned frame grid) and the per-utterance prosody
summary used as the latent-prosody stand-in. Text is featurized as hashed
unigram+bigram counts.

Per-utterance frame tracks are cached in a little-endian binary format:

    magic "CCF1" | sample_rate u32 | hop_us u32 | n_frames u32 | C u32
    f0[f32; n] | energy[f32; n] | cepstra[f32; n*C] row-major

Text vectors and prosody summaries live in JSON-lines caches next to the
binary files (text vectors stored sparsely as index/value lists).
"""

from __future__ import annotations

import json
import struct
import wave
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import FeatureError
from .util import fnv1a64

CACHE_MAGIC = b"CCF1"


@dataclass(frozen=True)
class FrameParams:
    frame_len: float = 0.025
    hop: float = 0.010
    f0_min: float = 70.0
    f0_max: float = 400.0
    voicing_threshold: float = 0.3
    silence_floor_db: float = -50.0
    n_mels: int = 40
    n_ceps: int = 13
    fft_len: int = 512

    def __post_init__(self):
        if not self.f0_min < self.f0_max:
            raise FeatureError("f0_min must be below f0_max")
        if self.n_mels < self.n_ceps:
            raise FeatureError("n_mels must be at least n_ceps")

    def to_dict(self) -> dict:
        return {
            "frame_len": self.frame_len,
            "hop": self.hop,
            "f0_min": self.f0_min,
            "f0_max": self.f0_max,
            "voicing_threshold": self.voicing_threshold,
            "silence_floor_db": self.silence_floor_db,
            "n_mels": self.n_mels,
            "n_ceps": self.n_ceps,
            "fft_len": self.fft_len,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "FrameParams":
        return cls(**d)


@dataclass
class FrameTrack:
    """Aligned per-frame tracks; f0 == 0 marks an unvoiced frame."""

    hop: float
    frame_len: float
    f0: np.ndarray
    energy: np.ndarray
    cepstra: np.ndarray  # (n_frames, C)

    def __post_init__(self):
        n = len(self.f0)
        if len(self.energy) != n or len(self.cepstra) != n:
            raise FeatureError("f0/energy/cepstra lengths disagree")

    def __len__(self) -> int:
        return len(self.f0)


@dataclass(frozen=True)
class TextFeatures:
    vector: np.ndarray
    token_count: int


@dataclass(frozen=True)
class ProsodyStats:
    """Six per-utterance prosody summaries, the latent-prosody proxy.

    Order: mean log-F0 over voiced frames, std log-F0, voiced-frame ratio,
    mean RMS energy, std RMS energy, duration in seconds. Log is natural.
    An all-unvoiced utterance reports 0 for both log-F0 entries.
    """

    vector: np.ndarray

    @property
    def mean_log_f0(self) -> float:
        return float(self.vector[0])

    @property
    def voiced_ratio(self) -> float:
        return float(self.vector[2])


PROSODY_DIM = 6


# ---------------------------------------------------------------------------
# WAV I/O
# ---------------------------------------------------------------------------

def read_wav(path) -> tuple[np.ndarray, int]:
    """Read a mono 16-bit PCM WAV; samples are scaled to [-1, 1] by 1/32768."""
    path = Path(path)
    try:
        with wave.open(str(path), "rb") as wf:
            if wf.getnchannels() != 1:
                raise FeatureError(f"{path}: expected mono, got {wf.getnchannels()} channels")
            if wf.getsampwidth() != 2:
                raise FeatureError(f"{path}: expected 16-bit PCM, got {8 * wf.getsampwidth()}-bit")
            n = wf.getnframes()
            rate = wf.getframerate()
            raw = wf.readframes(n)
    except wave.Error as exc:
        raise FeatureError(f"{path}: not a readable WAV file ({exc})") from exc
    if len(raw) != 2 * n:
        raise FeatureError(f"{path}: truncated file ({len(raw)} bytes for {n} frames)")
    if n == 0:
        raise FeatureError(f"{path}: empty waveform")
    samples = np.frombuffer(raw, dtype="<i2").astype(np.float64) / 32768.0
    return samples, rate


def write_wav(path, samples: np.ndarray, sample_rate: int) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    pcm = np.clip(np.rint(np.asarray(samples) * 32768.0), -32768, 32767).astype("<i2")
    with wave.open(str(path), "wb") as wf:
        wf.setnchannels(1)
        wf.setsampwidth(2)
        wf.setframerate(sample_rate)
        wf.writeframes(pcm.tobytes())


# ---------------------------------------------------------------------------
# Frame-level analysis
# ---------------------------------------------------------------------------

def _frame(samples: np.ndarray, sample_rate: int, params: FrameParams) -> np.ndarray:
    flen = int(round(params.frame_len * sample_rate))
    hop = int(round(params.hop * sample_rate))
    if len(samples) < flen:
        raise FeatureError(f"waveform shorter than one frame ({len(samples)} < {flen} samples)")
    return np.lib.stride_tricks.sliding_window_view(samples, flen)[::hop]


def extract_energy(samples: np.ndarray, sample_rate: int, params: FrameParams) -> np.ndarray:
    frames = _frame(samples, sample_rate, params)
    return np.sqrt(np.mean(frames**2, axis=1))


def extract_f0(samples: np.ndarray, sample_rate: int, params: FrameParams) -> np.ndarray:
    """Per-frame F0 in Hz (0 for unvoiced) by normalized autocorrelation.

    A frame is voiced when the autocorrelation peak over candidate lags
    [sr/f0_max, sr/f0_min] reaches the voicing threshold and the frame RMS
    clears the silence floor. The peak lag is refined by parabolic
    interpolation before conversion to Hz.
    """
    frames = _frame(samples, sample_rate, params)
    flen = frames.shape[1]
    rms = np.sqrt(np.mean(frames**2, axis=1))

    lag_min = int(np.ceil(sample_rate / params.f0_max))
    lag_max = int(np.floor(sample_rate / params.f0_min))
    lag_max = min(lag_max, flen - 2)
    lag_min = max(lag_min, 2)
    if lag_min >= lag_max:
        raise FeatureError("frame too short to hold two periods of f0_min")

    centered = frames - frames.mean(axis=1, keepdims=True)
    nfft = 1 << int(np.ceil(np.log2(2 * flen)))
    spec = np.fft.rfft(centered, nfft, axis=1)
    acorr = np.fft.irfft(spec * np.conj(spec), nfft, axis=1)[:, :flen]
    r0 = np.maximum(acorr[:, 0], 1e-12)

    window = acorr[:, lag_min : lag_max + 1]
    best = np.argmax(window, axis=1) + lag_min
    rows = np.arange(len(frames))
    peak = acorr[rows, best] / r0

    # Parabolic refinement around the integer peak lag.
    left = acorr[rows, best - 1]
    mid = acorr[rows, best]
    right = acorr[rows, best + 1]
    denom = left - 2 * mid + right
    delta = np.where(np.abs(denom) > 1e-12, 0.5 * (left - right) / np.where(denom == 0, 1, denom), 0.0)
    delta = np.clip(delta, -0.5, 0.5)
    lag = best + delta

    floor = 10 ** (params.silence_floor_db / 20.0)
    voiced = (peak >= params.voicing_threshold) & (rms >= floor)
    f0 = np.where(voiced, sample_rate / lag, 0.0)
    f0 = np.where(voiced, np.clip(f0, params.f0_min, params.f0_max), 0.0)
    return f0


def mel_filterbank(n_mels: int, fft_len: int, sample_rate: int) -> np.ndarray:
    """Triangular filters on the mel scale spanning 0 Hz to Nyquist."""
    def to_mel(f):
        return 2595.0 * np.log10(1.0 + np.asarray(f) / 700.0)

    def from_mel(m):
        return 700.0 * (10.0 ** (np.asarray(m) / 2595.0) - 1.0)

    n_bins = fft_len // 2 + 1
    freqs = np.arange(n_bins) * sample_rate / fft_len
    edges = from_mel(np.linspace(0.0, to_mel(sample_rate / 2.0), n_mels + 2))
    fb = np.zeros((n_mels, n_bins))
    for m in range(n_mels):
        lo, center, hi = edges[m], edges[m + 1], edges[m + 2]
        up = (freqs - lo) / max(center - lo, 1e-9)
        down = (hi - freqs) / max(hi - center, 1e-9)
        fb[m] = np.clip(np.minimum(up, down), 0.0, None)
    return fb


def _dct_matrix(n_ceps: int, n_mels: int) -> np.ndarray:
    j = np.arange(n_mels)
    k = np.arange(n_ceps)[:, None]
    return np.sqrt(2.0 / n_mels) * np.cos(np.pi * k * (2 * j + 1) / (2 * n_mels))


ENERGY_FLOOR = 1e-10


def extract_mel_cepstrum(samples: np.ndarray, sample_rate: int, params: FrameParams) -> np.ndarray:
    """Per-frame mel-cepstra: Hann window, power spectrum, log mel filterbank
    energies (floored at 1e-10), then a type-II DCT keeping C coefficients."""
    frames = _frame(samples, sample_rate, params)
    flen = frames.shape[1]
    if flen > params.fft_len:
        raise FeatureError(f"frame of {flen} samples exceeds fft_len {params.fft_len}")
    windowed = frames * np.hanning(flen)
    power = np.abs(np.fft.rfft(windowed, params.fft_len, axis=1)) ** 2
    fb = mel_filterbank(params.n_mels, params.fft_len, sample_rate)
    logmel = np.log(np.maximum(power @ fb.T, ENERGY_FLOOR))
    return logmel @ _dct_matrix(params.n_ceps, params.n_mels).T


def compute_frame_track(samples: np.ndarray, sample_rate: int, params: FrameParams) -> FrameTrack:
    return FrameTrack(
        hop=params.hop,
        frame_len=params.frame_len,
        f0=extract_f0(samples, sample_rate, params),
        energy=extract_energy(samples, sample_rate, params),
        cepstra=extract_mel_cepstrum(samples, sample_rate, params),
    )


def summarize_prosody(track: FrameTrack, duration: float) -> ProsodyStats:
    if len(track) == 0:
        raise FeatureError("empty frame track")
    voiced = track.f0 > 0
    if voiced.any():
        log_f0 = np.log(track.f0[voiced])
        mean_lf0, std_lf0 = float(log_f0.mean()), float(log_f0.std())
    else:
        mean_lf0, std_lf0 = 0.0, 0.0
    vec = np.array(
        [
            mean_lf0,
            std_lf0,
            float(voiced.mean()),
            float(track.energy.mean()),
            float(track.energy.std()),
            float(duration),
        ]
    )
    return ProsodyStats(vector=vec)


# ---------------------------------------------------------------------------
# Text featurization
# ---------------------------------------------------------------------------

def featurize_text(tokens, hash_dim: int = 1024) -> TextFeatures:
    """Hashed unigram+bigram counts, L2-normalized (zero vector for no text).

    Slots come from the 64-bit FNV-1a hash of the token (or of the two
    bigram tokens joined by a space) modulo hash_dim.
    """
    if hash_dim < 64 or hash_dim & (hash_dim - 1) != 0:
        raise FeatureError("hash_dim must be a power of two, at least 64")
    tokens = list(tokens)
    vec = np.zeros(hash_dim)
    for tok in tokens:
        vec[fnv1a64(tok.encode("utf-8")) % hash_dim] += 1.0
    for a, b in zip(tokens, tokens[1:]):
        vec[fnv1a64(f"{a} {b}".encode("utf-8")) % hash_dim] += 1.0
    norm = np.linalg.norm(vec)
    if norm > 0:
        vec /= norm
    return TextFeatures(vector=vec, token_count=len(tokens))


# ---------------------------------------------------------------------------
# Binary frame-track cache
# ---------------------------------------------------------------------------

def write_feature_cache(path, track: FrameTrack, sample_rate: int) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    n = len(track)
    c = track.cepstra.shape[1]
    header = CACHE_MAGIC + struct.pack("<IIII", sample_rate, int(round(track.hop * 1e6)), n, c)
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(track.f0.astype("<f4").tobytes())
        fh.write(track.energy.astype("<f4").tobytes())
        fh.write(np.ascontiguousarray(track.cepstra, dtype="<f4").tobytes())


def read_feature_cache(path) -> tuple[FrameTrack, int]:
    """Read a binary frame-track cache.

    The cache header does not record the analysis frame length, so the
    returned track reports frame_len 0.0.
    """
    path = Path(path)
    data = path.read_bytes()
    if len(data) < 20 or data[:4] != CACHE_MAGIC:
        raise FeatureError(f"{path}: not a feature cache (bad magic)")
    sample_rate, hop_us, n, c = struct.unpack("<IIII", data[4:20])
    expected = 20 + 4 * (n + n + n * c)
    if len(data) != expected:
        raise FeatureError(f"{path}: corrupted length ({len(data)} bytes, expected {expected})")
    body = np.frombuffer(data, dtype="<f4", offset=20)
    f0 = body[:n].astype(np.float64)
    energy = body[n : 2 * n].astype(np.float64)
    cepstra = body[2 * n :].reshape(n, c).astype(np.float64)
    return FrameTrack(hop=hop_us / 1e6, frame_len=0.0, f0=f0, energy=energy, cepstra=cepstra), sample_rate


# ---------------------------------------------------------------------------
# Corpus-level featurization and the in-memory feature store
# ---------------------------------------------------------------------------

@dataclass
class FeatureSet:
    """Per-utterance text vectors and prosody summaries, keyed by
    (conversation_id, index). This is everything the encoders may see;
    latent topics never enter."""

    hash_dim: int
    text: dict = field(default_factory=dict)
    prosody: dict = field(default_factory=dict)

    def text_vector(self, conv_id: str, index: int) -> np.ndarray:
        try:
            return self.text[(conv_id, index)]
        except KeyError:
            raise FeatureError(f"missing text features for ({conv_id!r}, {index})") from None

    def prosody_stats(self, conv_id: str, index: int) -> np.ndarray:
        try:
            return self.prosody[(conv_id, index)]
        except KeyError:
            raise FeatureError(f"missing prosody features for ({conv_id!r}, {index})") from None


def _cache_name(conv_id: str, index: int) -> str:
    safe = "".join(ch if ch.isalnum() or ch in "-_" else "_" for ch in conv_id)
    return f"{safe}_{fnv1a64(conv_id.encode('utf-8')) % 0xFFFF:04x}_{index:04d}.ccf"


def _featurize_one(args):
    wav_path, params, hash_dim, tokens = args
    samples, sr = read_wav(wav_path)
    track = compute_frame_track(samples, sr, params)
    stats = summarize_prosody(track, duration=len(samples) / sr)
    text = featurize_text(tokens, hash_dim)
    return track, sr, stats, text


def featurize_corpus(corpus, params: FrameParams, hash_dim: int, out_dir, workers: int = 1) -> FeatureSet:
    """Featurize every utterance; write caches under out_dir and return the
    in-memory feature set. Output bytes are independent of worker count."""
    out_dir = Path(out_dir)
    (out_dir / "features").mkdir(parents=True, exist_ok=True)
    utts = [utt for conv in corpus.conversations for utt in conv.utterances]
    jobs = [(corpus.audio_path(u), params, hash_dim, u.tokens) for u in utts]
    if workers > 1:
        from concurrent.futures import ProcessPoolExecutor

        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_featurize_one, jobs, chunksize=8))
    else:
        results = [_featurize_one(job) for job in jobs]

    fs = FeatureSet(hash_dim=hash_dim)
    text_lines = []
    prosody_lines = []
    for utt, (track, sr, stats, text) in zip(utts, results):
        key = (utt.conversation_id, utt.index)
        fs.text[key] = text.vector
        fs.prosody[key] = stats.vector
        write_feature_cache(out_dir / "features" / _cache_name(*key), track, sr)
        nz = np.flatnonzero(text.vector)
        text_lines.append(
            json.dumps(
                {
                    "conversation_id": utt.conversation_id,
                    "index": utt.index,
                    "token_count": text.token_count,
                    "hash_dim": hash_dim,
                    "indices": nz.tolist(),
                    "values": text.vector[nz].tolist(),
                },
                sort_keys=True,
            )
        )
        prosody_lines.append(
            json.dumps(
                {
                    "conversation_id": utt.conversation_id,
                    "index": utt.index,
                    "stats": stats.vector.tolist(),
                },
                sort_keys=True,
            )
        )
    (out_dir / "text_features.jsonl").write_text("\n".join(text_lines) + "\n", encoding="utf-8")
    (out_dir / "prosody.jsonl").write_text("\n".join(prosody_lines) + "\n", encoding="utf-8")
    return fs


def load_feature_set(feature_dir) -> FeatureSet:
    feature_dir = Path(feature_dir)
    text_path = feature_dir / "text_features.jsonl"
    prosody_path = feature_dir / "prosody.jsonl"
    if not text_path.is_file() or not prosody_path.is_file():
        raise FeatureError(f"no feature caches under {feature_dir} (run featurize first)")
    hash_dim = None
    fs = None
    for line in text_path.read_text(encoding="utf-8").splitlines():
        rec = json.loads(line)
        if fs is None:
            hash_dim = int(rec["hash_dim"])
            fs = FeatureSet(hash_dim=hash_dim)
        vec = np.zeros(hash_dim)
        vec[np.asarray(rec["indices"], dtype=int)] = rec["values"]
        fs.text[(rec["conversation_id"], rec["index"])] = vec
    if fs is None:
        raise FeatureError(f"{text_path}: empty text feature cache")
    for line in prosody_path.read_text(encoding="utf-8").splitlines():
        rec = json.loads(line)
        fs.prosody[(rec["conversation_id"], rec["index"])] = np.asarray(rec["stats"], dtype=float)
    return fs
