"""Toy encoder-decoder transformer with chunked streaming support.

The encoder stacks feature frames, projects them, and runs pre-norm
self-attention blocks under a chunk visibility mask; an incremental path
reuses per-layer key/value caches so each chunk is encoded once. The
decoder is a standard causal transformer with cross-attention, used only
for teacher-forced scoring of complete hypotheses. Checkpoints are a
directory with a JSON manifest and a flat little-endian float32 blob.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .frontend import HOP_S
from .kernels import (
    QuantizedMatrix,
    gelu,
    layer_norm,
    log_softmax,
    masked_attention,
    quantize,
    quantized_linear,
)


class CheckpointError(RuntimeError):
    """Raised for malformed or inconsistent checkpoint directories."""


@dataclass(frozen=True)
class ModelConfig:
    d_model: int = 64
    heads: int = 4
    enc_layers: int = 2
    dec_layers: int = 2
    ffn_dim: int = 128
    feature_bins: int = 80
    stack_factor: int = 4
    ctc_vocab: int = 0
    dec_vocab: int = 0
    encoder_frame_s: float = 0.04

    def __post_init__(self):
        if self.heads < 1 or self.d_model % self.heads != 0:
            raise ValueError("d_model must be divisible by heads")
        if self.d_model % 2 != 0:
            raise ValueError("d_model must be even (sinusoidal positions)")
        if self.stack_factor < 1:
            raise ValueError("stack_factor must be >= 1")
        if abs(self.encoder_frame_s - HOP_S * self.stack_factor) > 1e-9:
            raise ValueError("encoder_frame_s must equal feature hop * stack_factor")
        if self.ctc_vocab < 2 or self.dec_vocab < 2:
            raise ValueError("vocabulary sizes must be set")


@dataclass(frozen=True)
class ChunkMaskSpec:
    """Visibility rule for streaming encoding: whole chunks, no lookahead."""

    chunk_frames: int
    left_context: int | None = None  # None = unbounded history
    right_context: int = 0

    def __post_init__(self):
        if self.chunk_frames < 1:
            raise ValueError("chunk_frames must be >= 1")


def build_chunk_mask(total_frames: int, spec: ChunkMaskSpec) -> np.ndarray:
    """Boolean (total, total) mask: frame i sees frame j iff j's chunk is
    not after i's chunk (plus any bounded left-context limit)."""
    if total_frames < 1:
        raise ValueError("total_frames must be >= 1")
    ci = np.arange(total_frames) // spec.chunk_frames
    diff = ci[:, None] - ci[None, :]
    allowed = diff >= -spec.right_context
    if spec.left_context is not None:
        allowed &= diff <= spec.left_context
    return allowed


def sample_chunk_frames(rng: np.random.Generator, cfg: ModelConfig) -> int:
    """Draw a training chunk size uniformly over the 0.1 s to 1.0 s range."""
    lo = int(np.ceil(0.1 / cfg.encoder_frame_s))
    hi = int(round(1.0 / cfg.encoder_frame_s))
    return int(rng.integers(lo, hi + 1))


# Parameter naming: weights are stored (in, out) so application is x @ w + b.
def parameter_manifest(cfg: ModelConfig) -> list[tuple[str, tuple[int, ...]]]:
    d, f = cfg.d_model, cfg.ffn_dim
    names: list[tuple[str, tuple[int, ...]]] = []
    names.append(("enc.in.w", (cfg.feature_bins * cfg.stack_factor, d)))
    names.append(("enc.in.b", (d,)))
    for i in range(cfg.enc_layers):
        p = f"enc.{i}."
        names += [(p + "ln1.g", (d,)), (p + "ln1.b", (d,))]
        for nm in ("wq", "wk", "wv", "wo"):
            names.append((p + "att." + nm, (d, d)))
        for nm in ("bq", "bk", "bv", "bo"):
            names.append((p + "att." + nm, (d,)))
        names += [(p + "ln2.g", (d,)), (p + "ln2.b", (d,))]
        names += [
            (p + "ffn.w1", (d, f)),
            (p + "ffn.b1", (f,)),
            (p + "ffn.w2", (f, d)),
            (p + "ffn.b2", (d,)),
        ]
    names += [("enc.ln.g", (d,)), ("enc.ln.b", (d,))]

    names.append(("dec.embed", (cfg.dec_vocab, d)))
    for i in range(cfg.dec_layers):
        p = f"dec.{i}."
        names += [(p + "ln1.g", (d,)), (p + "ln1.b", (d,))]
        for nm in ("wq", "wk", "wv", "wo"):
            names.append((p + "att." + nm, (d, d)))
        for nm in ("bq", "bk", "bv", "bo"):
            names.append((p + "att." + nm, (d,)))
        names += [(p + "ln2.g", (d,)), (p + "ln2.b", (d,))]
        for nm in ("wq", "wk", "wv", "wo"):
            names.append((p + "xatt." + nm, (d, d)))
        for nm in ("bq", "bk", "bv", "bo"):
            names.append((p + "xatt." + nm, (d,)))
        names += [(p + "ln3.g", (d,)), (p + "ln3.b", (d,))]
        names += [
            (p + "ffn.w1", (d, f)),
            (p + "ffn.b1", (f,)),
            (p + "ffn.w2", (f, d)),
            (p + "ffn.b2", (d,)),
        ]
    names += [("dec.ln.g", (d,)), ("dec.ln.b", (d,))]

    names += [("ctc_head.w", (d, cfg.ctc_vocab)), ("ctc_head.b", (cfg.ctc_vocab,))]
    names += [("dec_head.w", (d, cfg.dec_vocab)), ("dec_head.b", (cfg.dec_vocab,))]
    return names


HEAD_CTC = frozenset({"ctc_head.w", "ctc_head.b"})
HEAD_DEC = frozenset({"dec_head.w", "dec_head.b"})


def _is_linear_weight(name: str, arr: np.ndarray) -> bool:
    return arr.ndim == 2 and name != "dec.embed"


@dataclass
class Checkpoint:
    """Immutable model parameters plus the tokenizer they were built for.

    ``quantized`` marks a runtime view whose linear weights have been
    converted to int8; the float parameters stay available for everything
    the quantized path does not cover.
    """

    config: ModelConfig
    params: dict[str, np.ndarray]
    tokenizer_hash: str = ""
    quantized: bool = False
    qweights: dict[str, QuantizedMatrix] = field(
        default_factory=dict, repr=False, compare=False
    )

    def with_quantization(self) -> "Checkpoint":
        q = {
            name: quantize(w.T)  # per-output-row scales
            for name, w in self.params.items()
            if _is_linear_weight(name, w)
        }
        return replace(self, quantized=True, qweights=q)


def init_toy(cfg: ModelConfig, seed: int, tokenizer_hash: str = "") -> Checkpoint:
    """Deterministic scaled-normal initialization (gain 0.02, zero biases)."""
    rng = np.random.default_rng(seed)
    params: dict[str, np.ndarray] = {}
    for name, shape in parameter_manifest(cfg):
        if name.endswith(".g"):
            params[name] = np.ones(shape, dtype=np.float32)
        elif name.endswith((".b", ".b1", ".b2")) or name.split(".")[-1].startswith("b"):
            params[name] = np.zeros(shape, dtype=np.float32)
        else:
            params[name] = rng.normal(0.0, 0.02, size=shape).astype(np.float32)
    return Checkpoint(cfg, params, tokenizer_hash)


def save_checkpoint(ckpt: Checkpoint, dirpath) -> None:
    path = Path(dirpath)
    path.mkdir(parents=True, exist_ok=True)
    tensors = []
    offset = 0
    blobs = []
    for name, shape in parameter_manifest(ckpt.config):
        arr = np.ascontiguousarray(ckpt.params[name], dtype="<f4")
        tensors.append({"name": name, "shape": list(shape), "offset": offset})
        offset += arr.nbytes
        blobs.append(arr.tobytes())
    manifest = {
        "config": {
            k: getattr(ckpt.config, k) for k in ModelConfig.__dataclass_fields__
        },
        "tokenizer_hash": ckpt.tokenizer_hash,
        "tensors": tensors,
    }
    with open(path / "manifest.json", "w", encoding="utf-8") as f:
        json.dump(manifest, f, indent=1)
    with open(path / "weights.bin", "wb") as f:
        f.write(b"".join(blobs))


def load_checkpoint(dirpath) -> Checkpoint:
    path = Path(dirpath)
    try:
        with open(path / "manifest.json", "r", encoding="utf-8") as f:
            manifest = json.load(f)
    except FileNotFoundError:
        raise CheckpointError(f"no manifest.json under {path}")
    except json.JSONDecodeError as e:
        raise CheckpointError(f"corrupt manifest.json: {e}")
    try:
        cfg = ModelConfig(**manifest["config"])
    except (KeyError, TypeError, ValueError) as e:
        raise CheckpointError(f"bad checkpoint config: {e}")
    try:
        blob = (path / "weights.bin").read_bytes()
    except FileNotFoundError:
        raise CheckpointError(f"no weights.bin under {path}")

    entries = {t["name"]: t for t in manifest.get("tensors", [])}
    expected = parameter_manifest(cfg)
    expected_names = {n for n, _ in expected}
    for name in entries:
        if name not in expected_names:
            raise CheckpointError(f"unexpected tensor '{name}' in manifest")
    params: dict[str, np.ndarray] = {}
    for name, shape in expected:
        if name not in entries:
            raise CheckpointError(f"checkpoint missing tensor '{name}'")
        ent = entries[name]
        if tuple(ent["shape"]) != shape:
            raise CheckpointError(
                f"tensor '{name}' has shape {ent['shape']}, expected {list(shape)}"
            )
        count = int(np.prod(shape)) if shape else 1
        start = ent["offset"]
        end = start + 4 * count
        if end > len(blob):
            raise CheckpointError(f"tensor '{name}' overruns weights.bin")
        arr = np.frombuffer(blob[start:end], dtype="<f4").reshape(shape)
        params[name] = arr.astype(np.float32)
    return Checkpoint(cfg, params, manifest.get("tokenizer_hash", ""))


def _linear(ckpt: Checkpoint, x: np.ndarray, wname: str, bname: str | None):
    b = ckpt.params[bname] if bname else None
    if ckpt.quantized and wname in ckpt.qweights:
        flat = x.reshape(-1, x.shape[-1])
        y = quantized_linear(flat, ckpt.qweights[wname], b)
        return y.reshape(x.shape[:-1] + (y.shape[-1],))
    y = x @ ckpt.params[wname]
    if b is not None:
        y = y + b
    return y


def sinusoid_positions(positions, d: int) -> np.ndarray:
    pos = np.asarray(positions, dtype=np.float64)[:, None]
    idx = np.arange(d // 2, dtype=np.float64)[None, :]
    angles = pos / np.power(10000.0, 2.0 * idx / d)
    pe = np.zeros((pos.shape[0], d), dtype=np.float32)
    pe[:, 0::2] = np.sin(angles)
    pe[:, 1::2] = np.cos(angles)
    return pe


def stack_frames(values: np.ndarray, factor: int) -> np.ndarray:
    """Group consecutive feature frames; a trailing partial group is dropped."""
    t = values.shape[0] // factor
    return values[: t * factor].reshape(t, factor * values.shape[1])


def _encoder_layer(ckpt, x, rows_mask, li, cache=None):
    cfg = ckpt.config
    p = f"enc.{li}."
    h = layer_norm(x, ckpt.params[p + "ln1.g"], ckpt.params[p + "ln1.b"])
    q = _linear(ckpt, h, p + "att.wq", p + "att.bq")
    k = _linear(ckpt, h, p + "att.wk", p + "att.bk")
    v = _linear(ckpt, h, p + "att.wv", p + "att.bv")
    if cache is not None:
        k = np.concatenate([cache.keys[li], k], axis=0)
        v = np.concatenate([cache.values[li], v], axis=0)
        cache.keys[li] = k
        cache.values[li] = v
    att = masked_attention(q, k, v, rows_mask, cfg.heads)
    x = x + _linear(ckpt, att, p + "att.wo", p + "att.bo")
    h = layer_norm(x, ckpt.params[p + "ln2.g"], ckpt.params[p + "ln2.b"])
    f = gelu(_linear(ckpt, h, p + "ffn.w1", p + "ffn.b1"))
    return x + _linear(ckpt, f, p + "ffn.w2", p + "ffn.b2")


def encode_full(features, mask_spec: ChunkMaskSpec, ckpt: Checkpoint) -> np.ndarray:
    """Encode a whole utterance under the chunk mask. Deterministic."""
    values = features.values if hasattr(features, "values") else np.asarray(features)
    cfg = ckpt.config
    if values.shape[0] < cfg.stack_factor:
        raise ValueError("encode_full: input shorter than one stacked frame")
    x = stack_frames(values.astype(np.float32), cfg.stack_factor)
    t = x.shape[0]
    x = _linear(ckpt, x, "enc.in.w", "enc.in.b") + sinusoid_positions(
        np.arange(t), cfg.d_model
    )
    mask = build_chunk_mask(t, mask_spec)
    for li in range(cfg.enc_layers):
        x = _encoder_layer(ckpt, x, mask, li)
    return layer_norm(x, ckpt.params["enc.ln.g"], ckpt.params["enc.ln.b"])


@dataclass
class KVCache:
    """Per-layer attention keys/values of already-encoded frames.

    Single-owner mutable state: one cache belongs to one streaming
    segment and is discarded at segment reset.
    """

    spec: ChunkMaskSpec
    keys: list[np.ndarray]
    values: list[np.ndarray]
    frames_cached: int = 0
    finished: bool = False


def new_cache(ckpt: Checkpoint, spec: ChunkMaskSpec) -> KVCache:
    d = ckpt.config.d_model
    empty = lambda: np.zeros((0, d), dtype=np.float32)  # noqa: E731
    return KVCache(
        spec,
        [empty() for _ in range(ckpt.config.enc_layers)],
        [empty() for _ in range(ckpt.config.enc_layers)],
    )


def encode_incremental(
    cache: KVCache, chunk_features, ckpt: Checkpoint, final: bool = False
) -> tuple[np.ndarray, KVCache]:
    """Encode one (or more) whole chunks, reusing cached keys/values.

    The returned rows equal the corresponding rows of encode_full over the
    concatenated stream with the same mask spec. Non-final calls must
    supply feature frames that stack into a multiple of spec.chunk_frames;
    a final call may carry a trailing partial chunk and closes the cache.
    """
    values = (
        chunk_features.values
        if hasattr(chunk_features, "values")
        else np.asarray(chunk_features)
    )
    cfg = ckpt.config
    spec = cache.spec
    if cache.finished:
        raise ValueError("encode_incremental: stale cache (already finalized)")
    if cache.frames_cached % spec.chunk_frames != 0:
        raise ValueError("encode_incremental: stale cache (mid-chunk state)")
    n_feat = values.shape[0]
    if not final and n_feat % cfg.stack_factor != 0:
        raise ValueError(
            "encode_incremental: feature frames must divide stack_factor"
        )
    x = stack_frames(values.astype(np.float32), cfg.stack_factor)
    c_new = x.shape[0]
    if not final and c_new % spec.chunk_frames != 0:
        raise ValueError(
            "encode_incremental: chunk must yield whole mask chunks "
            f"(got {c_new} frames for chunk_frames={spec.chunk_frames})"
        )
    if final:
        cache.finished = True
    if c_new == 0:
        return np.zeros((0, cfg.d_model), dtype=np.float32), cache

    start = cache.frames_cached
    total = start + c_new
    x = _linear(ckpt, x, "enc.in.w", "enc.in.b") + sinusoid_positions(
        np.arange(start, total), cfg.d_model
    )
    rows_mask = build_chunk_mask(total, spec)[start:, :]
    for li in range(cfg.enc_layers):
        x = _encoder_layer(ckpt, x, rows_mask, li, cache=cache)
    cache.frames_cached = total
    out = layer_norm(x, ckpt.params["enc.ln.g"], ckpt.params["enc.ln.b"])
    return out, cache


def ctc_logits(enc_out: np.ndarray, ckpt: Checkpoint) -> np.ndarray:
    return _linear(ckpt, enc_out, "ctc_head.w", "ctc_head.b")


def decoder_hidden(ids: np.ndarray, enc_out: np.ndarray, ckpt: Checkpoint):
    """Final decoder hidden states for a (B, L) batch of token ids.

    Self-attention is causal; cross-attention sees the whole encoder
    output. The projection to vocabulary logits is left to the caller.
    """
    cfg = ckpt.config
    ids = np.asarray(ids)
    squeeze = ids.ndim == 1
    if squeeze:
        ids = ids[None, :]
    B, L = ids.shape
    x = ckpt.params["dec.embed"][ids] + sinusoid_positions(np.arange(L), cfg.d_model)
    causal = np.tril(np.ones((L, L), dtype=bool))
    S = enc_out.shape[0]
    cross_mask = np.ones((L, S), dtype=bool)
    for li in range(cfg.dec_layers):
        p = f"dec.{li}."
        h = layer_norm(x, ckpt.params[p + "ln1.g"], ckpt.params[p + "ln1.b"])
        q = _linear(ckpt, h, p + "att.wq", p + "att.bq")
        k = _linear(ckpt, h, p + "att.wk", p + "att.bk")
        v = _linear(ckpt, h, p + "att.wv", p + "att.bv")
        x = x + _linear(
            ckpt, masked_attention(q, k, v, causal, cfg.heads), p + "att.wo", p + "att.bo"
        )
        h = layer_norm(x, ckpt.params[p + "ln2.g"], ckpt.params[p + "ln2.b"])
        q = _linear(ckpt, h, p + "xatt.wq", p + "xatt.bq")
        ek = _linear(ckpt, enc_out, p + "xatt.wk", p + "xatt.bk")
        ev = _linear(ckpt, enc_out, p + "xatt.wv", p + "xatt.bv")
        x = x + _linear(
            ckpt,
            masked_attention(q, ek, ev, cross_mask, cfg.heads),
            p + "xatt.wo",
            p + "xatt.bo",
        )
        h = layer_norm(x, ckpt.params[p + "ln3.g"], ckpt.params[p + "ln3.b"])
        f = gelu(_linear(ckpt, h, p + "ffn.w1", p + "ffn.b1"))
        x = x + _linear(ckpt, f, p + "ffn.w2", p + "ffn.b2")
    x = layer_norm(x, ckpt.params["dec.ln.g"], ckpt.params["dec.ln.b"])
    return x[0] if squeeze else x


def decoder_score_batch(
    hyps: list[list[int]],
    enc_out: np.ndarray,
    ckpt: Checkpoint,
    prompt_len: int,
    eos_id: int | None = None,
) -> list[float]:
    """Teacher-forced log-probability of each hypothesis, in one padded pass.

    Each hypothesis must start with ``prompt_len`` prompt tokens and end
    with eos; the score sums log P over content and eos positions only,
    and padding never contributes.
    """
    if not hyps:
        raise ValueError("decoder_score_batch: empty hypothesis list")
    for h in hyps:
        if len(h) < prompt_len + 1:
            raise ValueError("decoder_score_batch: hypothesis missing prompt or eos")
        if eos_id is not None and h[-1] != eos_id:
            raise ValueError("decoder_score_batch: hypothesis missing eos")
    B = len(hyps)
    L = max(len(h) for h in hyps)
    ids_in = np.zeros((B, L - 1), dtype=np.int64)
    for b, h in enumerate(hyps):
        ids_in[b, : len(h) - 1] = h[:-1]
    hidden = decoder_hidden(ids_in, enc_out, ckpt)
    logits = _linear(ckpt, hidden, "dec_head.w", "dec_head.b")
    lsm = log_softmax(logits, axis=-1)
    scores = []
    for b, h in enumerate(hyps):
        s = 0.0
        for t in range(prompt_len, len(h)):
            s += float(lsm[b, t - 1, h[t]])
        scores.append(s)
    return scores
