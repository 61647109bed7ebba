"""Streaming orchestrator: audio in, transcript events out.

A session consumes audio chunk by chunk, advances the incremental
encoder and the CTC prefix beam, emits one partial transcript per fed
chunk, and finalizes segments through attention rescoring whenever the
endpoint detector fires. Long streams are handled by resetting both the
beam and the KV cache at every final, which also bounds the quadratic
attention cost. Many sessions may run concurrently against one shared
checkpoint; a single session is strictly serial.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .ctc import BeamState, beam_start, prefix_beam_step, top_k
from .frontend import HOP_S, SAMPLE_RATE, StreamingFramer
from .kernels import log_softmax
from .model import Checkpoint, ChunkMaskSpec, encode_incremental, ctc_logits, new_cache
from .tokenizer import HybridTokenizer
from .two_pass import (
    ENDPOINT_NONE,
    EndpointConfig,
    RescoreConfig,
    detect_endpoint,
    rescore,
)


@dataclass
class SessionConfig:
    chunk_size_s: float = 1.0
    beam: int = 10
    top_k: int = 6
    endpoint: EndpointConfig = field(default_factory=EndpointConfig)
    rescore: RescoreConfig | None = None
    quantized: bool = True
    alpha: float = 0.3  # hybrid loss weight; training only, echoed in metrics

    def __post_init__(self):
        if self.chunk_size_s <= 0:
            raise ValueError("chunk_size_s must be positive")
        if self.rescore is None:
            self.rescore = RescoreConfig(top_k=self.top_k, beam=self.beam)

    def to_dict(self) -> dict:
        return {
            "chunk_size_s": self.chunk_size_s,
            "beam": self.beam,
            "top_k": self.top_k,
            "silence_s": self.endpoint.silence_s,
            "max_delay_s": self.endpoint.max_delay_s,
            "ctc_weight": self.rescore.ctc_weight,
            "quantized": self.quantized,
            "alpha": self.alpha,
        }


@dataclass
class TranscriptEvent:
    kind: str  # "partial" | "final"
    segment: int
    text: str
    audio_time_s: float
    wall_time_s: float

    def to_record(self) -> dict:
        return {
            "kind": self.kind,
            "segment": self.segment,
            "text": self.text,
            "audio_time_s": round(self.audio_time_s, 6),
            "wall_time_ms": round(self.wall_time_s * 1000.0, 3),
        }


@dataclass
class Metrics:
    rtf: float
    avg_finalize_latency_ms: float
    avg_partial_latency_ms: float

    def to_dict(self) -> dict:
        return {
            "rtf": self.rtf,
            "avg_finalize_latency_ms": self.avg_finalize_latency_ms,
            "avg_partial_latency_ms": self.avg_partial_latency_ms,
        }


def chunk_encoder_frames(chunk_size_s: float, encoder_frame_s: float) -> int:
    """Encoder frames per audio chunk, rounded half up; <1 is rejected."""
    frames = int(chunk_size_s / encoder_frame_s + 0.5)
    if frames < 1:
        raise ValueError(
            f"chunk of {chunk_size_s}s yields no encoder frame "
            f"(frame is {encoder_frame_s}s)"
        )
    return frames


class StreamingSession:
    """Single-stream recognizer state. Not thread-safe; one owner at a time."""

    def __init__(self, ckpt: Checkpoint, tok: HybridTokenizer, config: SessionConfig):
        self.config = config
        self.tok = tok
        self.ckpt = ckpt.with_quantization() if config.quantized else ckpt
        self.frame_s = ckpt.config.encoder_frame_s
        self.chunk_frames = chunk_encoder_frames(config.chunk_size_s, self.frame_s)
        self.mask_spec = ChunkMaskSpec(chunk_frames=self.chunk_frames)
        self.stack = ckpt.config.stack_factor

        self._framer = StreamingFramer()
        self._feat_buf = np.zeros((0, ckpt.config.feature_bins), dtype=np.float32)
        self._cache = new_cache(self.ckpt, self.mask_spec)
        self._beam: BeamState = beam_start()
        self._seg_enc: list[np.ndarray] = []
        self._seg_frames = 0  # decoded encoder frames in the open segment
        self._stream_frames = 0  # decoded encoder frames since open
        self._segment = 0
        self._audio_fed_s = 0.0
        self._events: list[TranscriptEvent] = []
        self._start = time.perf_counter()
        self._processing_s = 0.0
        self._partial_s: list[float] = []
        self._finalize_s: list[float] = []
        self._closed = False

    # -- internals ---------------------------------------------------------

    def _now(self) -> float:
        return time.perf_counter() - self._start

    def _top1(self) -> tuple[tuple[int, ...], float]:
        hyp = top_k(self._beam, 1)[0]
        return hyp.ids, hyp.ctc_score

    def _decode_chunk(self, feats: np.ndarray, final: bool, events: list) -> float:
        """Advance encoder + beam over one mask chunk; returns finalize time.

        The endpoint is checked after every posterior frame. When it fires
        mid-chunk, the segment finalizes right there and the not yet
        consumed feature frames go back to the buffer, so the next segment
        re-encodes them from a clean cache (exact segment isolation).
        """
        out, self._cache = encode_incremental(self._cache, feats, self.ckpt, final=final)
        spent_finalizing = 0.0
        if not out.shape[0]:
            return spent_finalizing
        lps = log_softmax(ctc_logits(out, self.ckpt), axis=-1)
        consumed = 0
        for r, row in enumerate(lps):
            self._beam = prefix_beam_step(self._beam, row, self.config.beam)
            self._seg_frames += 1
            self._stream_frames += 1
            ids, _ = self._top1()
            decision = detect_endpoint(
                self._beam.trailing_blank_frames * self.frame_s,
                self._seg_frames * self.frame_s,
                has_content=bool(ids),
                cfg=self.config.endpoint,
            )
            if decision != ENDPOINT_NONE:
                self._seg_enc.append(out[consumed : r + 1])
                spent_finalizing += self._finalize(events)
                consumed = r + 1
                if consumed < out.shape[0]:
                    remainder = feats[consumed * self.stack :]
                    self._feat_buf = np.concatenate([remainder, self._feat_buf])
                return spent_finalizing
        self._seg_enc.append(out[consumed:])
        return spent_finalizing

    def _finalize(self, events: list) -> float:
        t0 = time.perf_counter()
        hyps = top_k(self._beam, self.config.top_k)
        for h in hyps:
            h.text = self.tok.decode_ctc_text(h.ids)
        if self._seg_enc:
            enc_out = np.concatenate(self._seg_enc, axis=0)
            best, _ = rescore(hyps, enc_out, self.tok, self.ckpt, self.config.rescore)
            text = best.text
        else:
            text = ""  # nothing decoded in this segment; nothing to rescore
        events.append(
            TranscriptEvent(
                kind="final",
                segment=self._segment,
                text=text,
                audio_time_s=self._stream_frames * self.frame_s,
                wall_time_s=self._now(),
            )
        )
        # Segment reset: fresh beam, fresh cache, bounded memory.
        self._beam = beam_start()
        self._cache = new_cache(self.ckpt, self.mask_spec)
        self._seg_enc = []
        self._seg_frames = 0
        self._segment += 1
        dt = time.perf_counter() - t0
        self._finalize_s.append(dt)
        return dt

    # -- public API ---------------------------------------------------------

    def feed(self, audio_chunk: np.ndarray) -> list[TranscriptEvent]:
        """Consume one audio chunk; returns the events it produced.

        Emits at most one partial (the beam's best prefix after all fully
        available encoder chunks are decoded) plus any finals triggered by
        endpoints along the way.
        """
        if self._closed:
            raise RuntimeError("feed after close")
        t0 = time.perf_counter()
        events: list[TranscriptEvent] = []
        frames = self._framer.push(np.asarray(audio_chunk, dtype=np.float32))
        if frames.shape[0]:
            self._feat_buf = np.concatenate([self._feat_buf, frames])
        need = self.chunk_frames * self.stack
        finalizing = 0.0
        while self._feat_buf.shape[0] >= need:
            chunk, self._feat_buf = self._feat_buf[:need], self._feat_buf[need:]
            finalizing += self._decode_chunk(chunk, final=False, events=events)
        ids, _ = self._top1()
        events.append(
            TranscriptEvent(
                kind="partial",
                segment=self._segment,
                text=self.tok.decode_ctc_text(ids),
                audio_time_s=self._stream_frames * self.frame_s,
                wall_time_s=self._now(),
            )
        )
        self._audio_fed_s += len(audio_chunk) / SAMPLE_RATE
        spent = time.perf_counter() - t0
        self._processing_s += spent
        self._partial_s.append(spent - finalizing)
        self._events.extend(events)
        return events

    def close(self) -> tuple[TranscriptEvent | None, Metrics]:
        """Flush pending audio, finalize remaining content, report metrics."""
        if self._closed:
            raise RuntimeError("session already closed")
        t0 = time.perf_counter()
        events: list[TranscriptEvent] = []
        # Flush whatever still stacks into encoder frames; a mid-flush
        # endpoint returns its remainder to the buffer, hence the loop.
        while self._feat_buf.shape[0] >= self.stack:
            leftover = self._feat_buf
            self._feat_buf = self._feat_buf[:0]
            self._decode_chunk(leftover, final=True, events=events)
        ids, _ = self._top1()
        if ids:
            self._finalize(events)
        final_event = events[-1] if events else None
        self._events.extend(events)
        self._processing_s += time.perf_counter() - t0
        self._closed = True
        rtf = self._processing_s / self._audio_fed_s if self._audio_fed_s > 0 else 0.0
        metrics = Metrics(
            rtf=rtf,
            avg_finalize_latency_ms=(
                1000.0 * float(np.mean(self._finalize_s)) if self._finalize_s else 0.0
            ),
            avg_partial_latency_ms=(
                1000.0 * float(np.mean(self._partial_s)) if self._partial_s else 0.0
            ),
        )
        return final_event, metrics

    @property
    def events(self) -> list[TranscriptEvent]:
        return list(self._events)


def word_errors(reference: str, hypothesis: str) -> tuple[int, int]:
    """Levenshtein distance over whitespace-split words and the reference count."""
    ref = reference.split()
    hyp = hypothesis.split()
    prev = list(range(len(hyp) + 1))
    for i, r in enumerate(ref, start=1):
        cur = [i] + [0] * len(hyp)
        for j, h in enumerate(hyp, start=1):
            cur[j] = min(
                prev[j] + 1,  # deletion
                cur[j - 1] + 1,  # insertion
                prev[j - 1] + (r != h),  # substitution
            )
        prev = cur
    return prev[len(hyp)], len(ref)


def wer(reference: str, hypothesis: str) -> float:
    """Word error rate: edit operations over max(1, reference word count)."""
    errors, n_ref = word_errors(reference, hypothesis)
    return errors / max(1, n_ref)
