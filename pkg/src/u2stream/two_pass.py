"""Endpoint detection and attention rescoring.

A segment ends either on trailing silence (approximated by a run of
blank-argmax frames) or when the maximum-delay bound is hit. At that
point the top CTC hypotheses are bridged into the decoder token space
and scored in one teacher-forced batch; the fused score picks the final
transcript.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .ctc import Hypothesis
from .model import Checkpoint, decoder_score_batch
from .tokenizer import HybridTokenizer

ENDPOINT_NONE = "none"
ENDPOINT_SILENCE = "silence"
ENDPOINT_MAX_DELAY = "max_delay"


@dataclass(frozen=True)
class EndpointConfig:
    silence_s: float = 0.5
    max_delay_s: float = 12.0
    encoder_frame_s: float = 0.04

    def __post_init__(self):
        if self.silence_s <= 0:
            raise ValueError("silence_s must be positive")
        if self.max_delay_s < self.silence_s:
            raise ValueError("max_delay_s must be at least silence_s")


@dataclass(frozen=True)
class RescoreConfig:
    ctc_weight: float = 0.5
    top_k: int = 6
    beam: int = 10

    def __post_init__(self):
        if not (0.0 <= self.ctc_weight <= 1.0):
            raise ValueError("ctc_weight must lie in [0, 1]")
        if not (1 <= self.top_k <= self.beam):
            raise ValueError("need 1 <= top_k <= beam")


def detect_endpoint(
    trailing_blank_s: float,
    segment_elapsed_s: float,
    has_content: bool,
    cfg: EndpointConfig,
) -> str:
    """Decide whether the current segment should finalize.

    The max-delay rule fires unconditionally once the segment spans the
    bound; the silence rule fires only after content has been decoded, so
    leading silence never endpoints.
    """
    if trailing_blank_s < 0 or segment_elapsed_s < 0:
        raise ValueError("times must be nonnegative")
    if segment_elapsed_s >= cfg.max_delay_s:
        return ENDPOINT_MAX_DELAY
    if has_content and trailing_blank_s >= cfg.silence_s:
        return ENDPOINT_SILENCE
    return ENDPOINT_NONE


def rescore(
    hyps: list[Hypothesis],
    enc_out: np.ndarray,
    tok: HybridTokenizer,
    ckpt: Checkpoint,
    cfg: RescoreConfig,
) -> tuple[Hypothesis, list[float]]:
    """Rerank CTC hypotheses with the attention decoder.

    Each hypothesis is retokenized into the full space and scored in a
    single batched decoder pass; fused score = attention + ctc_weight *
    ctc. Ties break toward higher CTC score, then shorter text.
    """
    if not hyps:
        raise ValueError("rescore: empty hypothesis list")
    if len(hyps) > cfg.top_k:
        raise ValueError(f"rescore: {len(hyps)} hypotheses exceed top_k={cfg.top_k}")
    prompt = tok.prompt_ids()
    seqs = [tok.retokenize(h.ids, prompt=prompt) for h in hyps]
    att_scores = decoder_score_batch(
        seqs, enc_out, ckpt, prompt_len=len(prompt), eos_id=tok.eos_id
    )
    fused = [a + cfg.ctc_weight * h.ctc_score for a, h in zip(att_scores, hyps)]
    best = max(
        range(len(hyps)),
        key=lambda i: (fused[i], hyps[i].ctc_score, -len(hyps[i].text)),
    )
    return hyps[best], fused
