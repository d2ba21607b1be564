"""Context encoders for the textual and acoustic modalities.

Each encoder maps a history window to a fixed-dimension context vector:
per-entry inputs (hashed text counts, or the 6-dim prosody summary) are
concatenated with a hash-bucketed speaker embedding, aggregated with recency
weights w_j = 2^(j-i) normalized to sum 1 (newest entry dominates), then
passed through tanh(W_in . agg + b_in) followed by an affine output map.

Gradients are exact and hand-derived; finite differences in the test suite
hold them to a relative error below 1e-4. Both modalities share the topology
and differ only in input dimension; their parameters are disjoint.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import CheckpointError, EncoderError
from .features import FeatureSet, PROSODY_DIM
from .sampler import ContextWindow, TripletSampler
from .util import fnv1a64

CHECKPOINT_MAGIC = b"CCKP"
CHECKPOINT_VERSION = 1
APM_BLOCK_TAG = b"APM1"

MODALITIES = ("text", "audio")


@dataclass(frozen=True)
class EncoderDims:
    input_dim: int
    n_buckets: int = 64
    emb_dim: int = 8
    hidden_dim: int = 64
    out_dim: int = 32

    def as_tuple(self) -> tuple[int, int, int, int, int]:
        return (self.input_dim, self.n_buckets, self.emb_dim, self.hidden_dim, self.out_dim)


@dataclass
class EncoderParams:
    dims: EncoderDims
    emb: np.ndarray    # (n_buckets, emb_dim) speaker embedding table
    w_in: np.ndarray   # (hidden_dim, input_dim + emb_dim)
    b_in: np.ndarray   # (hidden_dim,)
    w_out: np.ndarray  # (out_dim, hidden_dim)
    b_out: np.ndarray  # (out_dim,)

    def arrays(self) -> tuple[np.ndarray, ...]:
        return (self.emb, self.w_in, self.b_in, self.w_out, self.b_out)

    @property
    def n_params(self) -> int:
        return sum(a.size for a in self.arrays())

    def pack(self) -> np.ndarray:
        return np.concatenate([a.ravel() for a in self.arrays()])


def _shapes(dims: EncoderDims) -> list[tuple[int, ...]]:
    return [
        (dims.n_buckets, dims.emb_dim),
        (dims.hidden_dim, dims.input_dim + dims.emb_dim),
        (dims.hidden_dim,),
        (dims.out_dim, dims.hidden_dim),
        (dims.out_dim,),
    ]


def params_from_vector(theta: np.ndarray, dims: EncoderDims) -> EncoderParams:
    """View a flat parameter vector as EncoderParams (no copies)."""
    arrays = []
    offset = 0
    for shape in _shapes(dims):
        size = int(np.prod(shape))
        arrays.append(theta[offset : offset + size].reshape(shape))
        offset += size
    if offset != theta.size:
        raise EncoderError(f"parameter vector of size {theta.size}, expected {offset}")
    return EncoderParams(dims, *arrays)


def zero_grads(dims: EncoderDims) -> EncoderParams:
    return params_from_vector(np.zeros(sum(int(np.prod(s)) for s in _shapes(dims))), dims)


def init_params(seed, dims: EncoderDims) -> EncoderParams:
    """Uniform(-b, b) weights with b = sqrt(6 / (fan_in + fan_out)); zero biases."""
    rng = np.random.default_rng(seed)
    params = zero_grads(dims)
    for arr in (params.emb, params.w_in, params.w_out):
        fan_out, fan_in = arr.shape
        bound = np.sqrt(6.0 / (fan_in + fan_out))
        arr[:] = rng.uniform(-bound, bound, size=arr.shape)
    return params


def speaker_bucket(speaker_id: str, n_buckets: int) -> int:
    return fnv1a64(speaker_id.encode("utf-8")) % n_buckets


def recency_weights(length: int) -> np.ndarray:
    w = 2.0 ** np.arange(1 - length, 1, dtype=np.float64)
    return w / w.sum()


def _entry_vector(features: FeatureSet, utt, modality: str) -> np.ndarray:
    if modality == "text":
        return features.text_vector(utt.conversation_id, utt.index)
    if modality == "audio":
        return features.prosody_stats(utt.conversation_id, utt.index)
    raise EncoderError(f"unknown modality {modality!r}")


def aggregate_windows(
    windows, features: FeatureSet, modality: str, n_buckets: int
) -> tuple[np.ndarray, np.ndarray]:
    """Recency-weighted input aggregates and speaker-bucket weight rows.

    The bucket rows make the speaker-embedding contribution a matrix product
    (rows @ emb), which keeps batched encoding and its backward pass cheap.
    """
    windows = list(windows)
    input_dim = features.hash_dim if modality == "text" else PROSODY_DIM
    agg = np.zeros((len(windows), input_dim))
    bucket_w = np.zeros((len(windows), n_buckets))
    for i, win in enumerate(windows):
        w = recency_weights(win.length)
        for j, utt in enumerate(win.entries):
            vec = _entry_vector(features, utt, modality)
            if vec.shape[0] != input_dim:
                raise EncoderError(
                    f"feature dim {vec.shape[0]} does not match input_dim {input_dim}"
                )
            agg[i] += w[j] * vec
            bucket_w[i, speaker_bucket(utt.speaker_id, n_buckets)] += w[j]
    return agg, bucket_w


def batch_forward(params: EncoderParams, agg: np.ndarray, bucket_w: np.ndarray):
    """Encode pre-aggregated windows; returns (outputs, cache for backward)."""
    if agg.shape[1] != params.dims.input_dim:
        raise EncoderError(
            f"aggregate dim {agg.shape[1]} does not match encoder input_dim {params.dims.input_dim}"
        )
    a = np.concatenate([agg, bucket_w @ params.emb], axis=1)
    h = np.tanh(a @ params.w_in.T + params.b_in)
    out = h @ params.w_out.T + params.b_out
    return out, (a, h)


def batch_backward(
    params: EncoderParams, cache, upstream: np.ndarray, bucket_w: np.ndarray
) -> EncoderParams:
    """Exact parameter gradients contracted with per-window upstream rows."""
    a, h = cache
    grads = zero_grads(params.dims)
    grads.b_out[:] = upstream.sum(axis=0)
    grads.w_out[:] = upstream.T @ h
    dh = upstream @ params.w_out
    dz = dh * (1.0 - h**2)
    grads.b_in[:] = dz.sum(axis=0)
    grads.w_in[:] = dz.T @ a
    da = dz @ params.w_in
    grads.emb[:] = bucket_w.T @ da[:, params.dims.input_dim :]
    return grads


def encode(window: ContextWindow, features: FeatureSet, params: EncoderParams, modality: str) -> np.ndarray:
    """Context vector for one history window."""
    agg, bucket_w = aggregate_windows([window], features, modality, params.dims.n_buckets)
    out, _ = batch_forward(params, agg, bucket_w)
    return out[0]


def encode_windows(windows, features: FeatureSet, params: EncoderParams, modality: str) -> np.ndarray:
    agg, bucket_w = aggregate_windows(windows, features, modality, params.dims.n_buckets)
    out, _ = batch_forward(params, agg, bucket_w)
    return out


def encode_backward(
    window: ContextWindow,
    features: FeatureSet,
    params: EncoderParams,
    modality: str,
    upstream: np.ndarray,
) -> EncoderParams:
    """Gradients of (upstream . output) w.r.t. every parameter."""
    upstream = np.asarray(upstream, dtype=np.float64)
    if upstream.shape != (params.dims.out_dim,):
        raise EncoderError(f"upstream gradient shape {upstream.shape}, expected ({params.dims.out_dim},)")
    agg, bucket_w = aggregate_windows([window], features, modality, params.dims.n_buckets)
    _, cache = batch_forward(params, agg, bucket_w)
    return batch_backward(params, cache, upstream[None, :], bucket_w)


class WindowBank:
    """Pre-aggregated inputs for every candidate window of a sampler.

    Rows align with TripletSampler.keys, so a sampled window maps straight
    to its row and a whole batch encodes with two matrix products.
    """

    def __init__(self, sampler: TripletSampler, features: FeatureSet, n_buckets: int):
        self.sampler = sampler
        windows = [sampler.window_at(i) for i in range(len(sampler.keys))]
        self.agg = {}
        self.bucket_w = {}
        for modality in MODALITIES:
            agg, bucket_w = aggregate_windows(windows, features, modality, n_buckets)
            self.agg[modality] = agg
            self.bucket_w[modality] = bucket_w  # identical across modalities, kept per key for clarity

    def rows(self, windows) -> np.ndarray:
        return np.array([self.sampler.row_of(w) for w in windows], dtype=int)

    def forward_rows(self, params: EncoderParams, modality: str, rows: np.ndarray):
        agg = self.agg[modality][rows]
        bucket_w = self.bucket_w[modality][rows]
        out, cache = batch_forward(params, agg, bucket_w)
        return out, cache, bucket_w


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

def _write_array(fh, arr: np.ndarray) -> None:
    fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def _write_encoder_block(fh, params: EncoderParams) -> None:
    fh.write(struct.pack("<5I", *params.dims.as_tuple()))
    for arr in params.arrays():
        _write_array(fh, arr)


def save_checkpoint(params_text: EncoderParams, params_audio: EncoderParams, meta: dict, path, apm=None) -> None:
    """Binary checkpoint; bit-exact round trip of all float64 parameters.

    Layout: magic, version u32, seed u64, step u64, then the text and audio
    encoder blocks (dims as u32 then arrays as f64), then an optional
    tagged prosody-predictor block.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", CHECKPOINT_VERSION))
        fh.write(struct.pack("<QQ", int(meta.get("seed", 0)), int(meta.get("step", 0))))
        _write_encoder_block(fh, params_text)
        _write_encoder_block(fh, params_audio)
        if apm is not None:
            fh.write(APM_BLOCK_TAG)
            fh.write(struct.pack("<3I", apm.ctx_dim, apm.lpv_dim, apm.attn_dim))
            for arr in apm.arrays():
                _write_array(fh, arr)


class _Reader:
    def __init__(self, data: bytes, path):
        self.data = data
        self.offset = 0
        self.path = path

    def take(self, n: int) -> bytes:
        if self.offset + n > len(self.data):
            raise CheckpointError(f"{self.path}: corrupted length (truncated at byte {self.offset})")
        chunk = self.data[self.offset : self.offset + n]
        self.offset += n
        return chunk

    def array(self, shape) -> np.ndarray:
        size = int(np.prod(shape))
        return np.frombuffer(self.take(8 * size), dtype="<f8").reshape(shape).copy()


def _read_encoder_block(reader: _Reader) -> EncoderParams:
    dims = EncoderDims(*struct.unpack("<5I", reader.take(20)))
    arrays = [reader.array(shape) for shape in _shapes(dims)]
    return EncoderParams(dims, *arrays)


def load_checkpoint(path, expect_dims: tuple[EncoderDims, EncoderDims] | None = None):
    """Load (params_text, params_audio, meta, apm_params_or_None)."""
    path = Path(path)
    data = path.read_bytes()
    reader = _Reader(data, path)
    if reader.take(4) != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    (version,) = struct.unpack("<I", reader.take(4))
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: version mismatch (file {version}, supported {CHECKPOINT_VERSION})")
    seed, step = struct.unpack("<QQ", reader.take(16))
    params_text = _read_encoder_block(reader)
    params_audio = _read_encoder_block(reader)
    apm = None
    if reader.offset < len(data):
        if reader.take(4) != APM_BLOCK_TAG:
            raise CheckpointError(f"{path}: unknown trailing block")
        from .prosody import ApmParams  # deferred to avoid an import cycle

        ctx_dim, lpv_dim, attn_dim = struct.unpack("<3I", reader.take(12))
        apm = ApmParams.from_reader(reader, ctx_dim, lpv_dim, attn_dim)
    if reader.offset != len(data):
        raise CheckpointError(f"{path}: corrupted length ({len(data) - reader.offset} trailing bytes)")
    if expect_dims is not None:
        for got, want, name in zip((params_text.dims, params_audio.dims), expect_dims, MODALITIES):
            if got != want:
                raise CheckpointError(
                    f"{path}: {name} encoder dimension mismatch (checkpoint {got}, expected {want})"
                )
    meta = {"seed": seed, "step": step}
    return params_text, params_audio, meta, apm
