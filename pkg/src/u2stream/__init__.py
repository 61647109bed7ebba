"""Desk-scale streaming two-pass speech recognition engine."""

from .ctc import (
    BeamState,
    Hypothesis,
    attention_ce_loss,
    beam_start,
    ctc_grad,
    ctc_loss,
    hybrid_loss,
    prefix_beam_step,
    top_k,
)
from .frontend import AudioBuffer, FeatureMatrix, decode_wav, log_mel
from .model import (
    Checkpoint,
    CheckpointError,
    ChunkMaskSpec,
    KVCache,
    ModelConfig,
    build_chunk_mask,
    encode_full,
    encode_incremental,
    init_toy,
    load_checkpoint,
    save_checkpoint,
)
from .session import Metrics, SessionConfig, StreamingSession, TranscriptEvent, wer
from .tokenizer import BpeVocab, HybridTokenizer, encode, decode
from .two_pass import EndpointConfig, RescoreConfig, detect_endpoint, rescore

__version__ = "0.1.0"

__all__ = [
    "AudioBuffer",
    "BeamState",
    "BpeVocab",
    "Checkpoint",
    "CheckpointError",
    "ChunkMaskSpec",
    "EndpointConfig",
    "FeatureMatrix",
    "HybridTokenizer",
    "Hypothesis",
    "KVCache",
    "Metrics",
    "ModelConfig",
    "RescoreConfig",
    "SessionConfig",
    "StreamingSession",
    "TranscriptEvent",
    "attention_ce_loss",
    "beam_start",
    "build_chunk_mask",
    "ctc_grad",
    "ctc_loss",
    "decode",
    "decode_wav",
    "detect_endpoint",
    "encode",
    "encode_full",
    "encode_incremental",
    "hybrid_loss",
    "init_toy",
    "load_checkpoint",
    "log_mel",
    "prefix_beam_step",
    "rescore",
    "save_checkpoint",
    "top_k",
    "wer",
]
