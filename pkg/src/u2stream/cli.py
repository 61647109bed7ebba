"""Command-line surface.

Subcommands wrap the library into runnable workflows: streaming
transcription with JSONL events, a benchmark harness with CSV output and
rendered figures, toy staged training, model initialization, feature
dumping, and vocabulary building. Machine-readable output goes to
stdout; progress goes to stderr. Exit codes: 0 success, 1 usage error,
2 data or model error.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import report, trainer
from .frontend import SAMPLE_RATE, decode_wav, log_mel, save_features
from .model import (
    Checkpoint,
    CheckpointError,
    ModelConfig,
    init_toy,
    load_checkpoint,
    save_checkpoint,
)
from .session import SessionConfig, StreamingSession, chunk_encoder_frames, word_errors
from .tokenizer import HybridTokenizer, load_vocab, save_vocab, train_bpe
from .two_pass import EndpointConfig, RescoreConfig


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


def _tokenizer_hash(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _load_pair(ckpt_dir, tok_path, check_hash=True) -> tuple[Checkpoint, HybridTokenizer, int]:
    try:
        ckpt = load_checkpoint(ckpt_dir)
    except CheckpointError as e:
        raise DataError(str(e))
    try:
        vocab = load_vocab(tok_path)
    except (OSError, ValueError, KeyError) as e:
        raise DataError(f"cannot load tokenizer {tok_path}: {e}")
    subset = ckpt.config.ctc_vocab - 1
    tok = HybridTokenizer(vocab, subset)
    if ckpt.config.dec_vocab != len(vocab):
        raise DataError(
            f"checkpoint expects {ckpt.config.dec_vocab} decoder tokens, "
            f"tokenizer has {len(vocab)}"
        )
    if check_hash and ckpt.tokenizer_hash:
        h = _tokenizer_hash(tok_path)
        if h != ckpt.tokenizer_hash:
            raise DataError(
                "tokenizer file does not match the checkpoint "
                f"(hash {h[:12]}.. != {ckpt.tokenizer_hash[:12]}..)"
            )
    return ckpt, tok, subset


def _session_config(args) -> SessionConfig:
    return SessionConfig(
        chunk_size_s=args.chunk_s,
        beam=args.beam,
        top_k=args.top_k,
        endpoint=EndpointConfig(silence_s=args.silence, max_delay_s=args.max_delay),
        rescore=RescoreConfig(
            ctc_weight=args.ctc_weight, top_k=args.top_k, beam=args.beam
        ),
        quantized=not args.no_quantize,
    )


def _run_session(ckpt, tok, cfg: SessionConfig, samples, emit=None):
    session = StreamingSession(ckpt, tok, cfg)
    step = int(round(cfg.chunk_size_s * SAMPLE_RATE))
    for start in range(0, len(samples), step):
        for ev in session.feed(samples[start : start + step]):
            if emit:
                emit(ev)
    final, metrics = session.close()
    if final is not None and emit:
        emit(final)
    return session.events, metrics


def cmd_transcribe(args) -> int:
    try:
        chunk_encoder_frames(args.chunk_s, 0.04)
    except ValueError as e:
        raise UsageError(str(e))
    ckpt, tok, _ = _load_pair(args.ckpt, args.tokenizer)
    try:
        audio = decode_wav(Path(args.audio).read_bytes())
    except OSError as e:
        raise DataError(f"cannot read {args.audio}: {e}")
    except ValueError as e:
        raise DataError(str(e))
    cfg = _session_config(args)

    def emit(ev):
        print(json.dumps(ev.to_record()), flush=True)

    print(f"transcribing {args.audio} ({len(audio.samples)/SAMPLE_RATE:.2f}s)",
          file=sys.stderr)
    events, metrics = _run_session(ckpt, tok, cfg, audio.samples, emit)
    summary = {"kind": "metrics", **metrics.to_dict(), "config": cfg.to_dict()}
    print(json.dumps(summary), flush=True)
    return 0


def _bench_one(task_args):
    """Worker for one (file, setting) cell; top level so it pickles."""
    ckpt_dir, tok_path, cfg_kwargs, wav_path, ref_path = task_args
    ckpt, tok, _ = _load_pair(ckpt_dir, tok_path)
    cfg = SessionConfig(
        chunk_size_s=cfg_kwargs["chunk_size_s"],
        beam=cfg_kwargs["beam"],
        top_k=cfg_kwargs["top_k"],
        endpoint=EndpointConfig(
            silence_s=cfg_kwargs["silence_s"], max_delay_s=cfg_kwargs["max_delay_s"]
        ),
        rescore=RescoreConfig(
            ctc_weight=cfg_kwargs["ctc_weight"],
            top_k=cfg_kwargs["top_k"],
            beam=cfg_kwargs["beam"],
        ),
        quantized=cfg_kwargs["quantized"],
    )
    audio = decode_wav(Path(wav_path).read_bytes())
    reference = Path(ref_path).read_text(encoding="utf-8").strip()
    events, metrics = _run_session(ckpt, tok, cfg, audio.samples)
    hypothesis = " ".join(ev.text for ev in events if ev.kind == "final").strip()
    errors, ref_words = word_errors(reference, hypothesis)
    return {
        "file": Path(wav_path).name,
        "errors": errors,
        "ref_words": ref_words,
        "rtf": metrics.rtf,
        "finalize_ms": metrics.avg_finalize_latency_ms,
        "partial_ms": metrics.avg_partial_latency_ms,
        "audio_s": len(audio.samples) / SAMPLE_RATE,
        "processing_s": metrics.rtf * len(audio.samples) / SAMPLE_RATE,
    }


def _parse_sweep(spec: str) -> list[float]:
    try:
        values = [float(v) for v in spec.split(",") if v.strip()]
    except ValueError:
        raise UsageError(f"bad sweep list: {spec!r}")
    if not values:
        raise UsageError("empty sweep list")
    return values


def cmd_bench(args) -> int:
    audio_dir = Path(args.audio_dir)
    wavs = sorted(audio_dir.glob("*.wav"))
    pairs = []
    for wav in wavs:
        ref = wav.with_suffix(".txt")
        if not ref.exists():
            raise DataError(f"missing reference transcript {ref}")
        pairs.append((wav, ref))
    if not pairs:
        raise DataError(f"no wav files under {audio_dir}")
    _load_pair(args.ckpt, args.tokenizer)  # fail fast on bad inputs

    settings = []
    if args.sweep_chunk:
        for c in _parse_sweep(args.sweep_chunk):
            settings.append({"chunk_size_s": c, "max_delay_s": args.max_delay})
    if args.sweep_max_delay:
        for d in _parse_sweep(args.sweep_max_delay):
            settings.append({"chunk_size_s": args.chunk_s, "max_delay_s": d})
    if not settings:
        settings.append({"chunk_size_s": args.chunk_s, "max_delay_s": args.max_delay})

    rows = []
    for setting in settings:
        try:
            chunk_encoder_frames(setting["chunk_size_s"], 0.04)
        except ValueError as e:
            raise UsageError(str(e))
        cfg_kwargs = {
            "chunk_size_s": setting["chunk_size_s"],
            "max_delay_s": setting["max_delay_s"],
            "silence_s": args.silence,
            "beam": args.beam,
            "top_k": args.top_k,
            "ctc_weight": args.ctc_weight,
            "quantized": not args.no_quantize,
        }
        tasks = [
            (args.ckpt, args.tokenizer, cfg_kwargs, str(w), str(r)) for w, r in pairs
        ]
        if args.jobs > 1:
            with ProcessPoolExecutor(max_workers=args.jobs) as pool:
                results = list(pool.map(_bench_one, tasks))
        else:
            results = [_bench_one(t) for t in tasks]
        for res in results:
            rows.append({**setting, **res, "wer": res["errors"] / max(1, res["ref_words"])})
            print(
                f"  {res['file']}: wer={rows[-1]['wer']:.3f} rtf={res['rtf']:.3f}",
                file=sys.stderr,
            )
        total_err = sum(r["errors"] for r in results)
        total_words = sum(r["ref_words"] for r in results)
        total_audio = sum(r["audio_s"] for r in results)
        total_proc = sum(r["processing_s"] for r in results)
        rows.append(
            {
                **setting,
                "file": "ALL",
                "errors": total_err,
                "ref_words": total_words,
                "wer": total_err / max(1, total_words),
                "rtf": total_proc / total_audio if total_audio else 0.0,
                "finalize_ms": float(np.mean([r["finalize_ms"] for r in results])),
                "partial_ms": float(np.mean([r["partial_ms"] for r in results])),
                "audio_s": total_audio,
                "processing_s": total_proc,
            }
        )

    columns = [
        "chunk_size_s", "max_delay_s", "file", "wer", "rtf",
        "finalize_ms", "partial_ms", "audio_s",
    ]
    buf = io.StringIO()
    writer = csv.writer(buf)
    writer.writerow(columns)
    for row in rows:
        writer.writerow(
            [
                row["chunk_size_s"], row["max_delay_s"], row["file"],
                f"{row['wer']:.6f}", f"{row['rtf']:.4f}",
                f"{row['finalize_ms']:.2f}", f"{row['partial_ms']:.2f}",
                f"{row['audio_s']:.2f}",
            ]
        )
    print(buf.getvalue(), end="")

    if args.out_dir:
        out = Path(args.out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "bench.csv").write_text(buf.getvalue(), encoding="utf-8")
        agg = [r for r in rows if r["file"] == "ALL"]
        if args.sweep_chunk:
            chunk_rows = [r for r in agg if any(
                abs(r["chunk_size_s"] - c) < 1e-9 for c in _parse_sweep(args.sweep_chunk)
            )]
            report.save_chunk_sweep_figure(chunk_rows, out / "wer_vs_chunk.png")
        if args.sweep_max_delay:
            delay_rows = [r for r in agg if any(
                abs(r["max_delay_s"] - d) < 1e-9 for d in _parse_sweep(args.sweep_max_delay)
            )]
            report.save_delay_sweep_figure(
                [
                    {
                        "max_delay_s": r["max_delay_s"],
                        "rtf": r["rtf"],
                        "avg_finalize_latency_ms": r["finalize_ms"],
                    }
                    for r in delay_rows
                ],
                out / "latency_vs_max_delay.png",
            )
        print(f"wrote {out / 'bench.csv'}", file=sys.stderr)
    return 0


def cmd_train_toy(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    print("building toy task...", file=sys.stderr)
    task = trainer.make_default_task()
    tok_path = out / "tokenizer.json"
    save_vocab(task.tok.full, tok_path)
    cfg = ModelConfig(
        d_model=args.d_model,
        heads=args.heads,
        enc_layers=args.enc_layers,
        dec_layers=args.dec_layers,
        ffn_dim=args.ffn_dim,
        ctc_vocab=task.tok.ctc_vocab,
        dec_vocab=task.tok.dec_vocab,
    )
    ckpt = init_toy(cfg, args.seed, tokenizer_hash=_tokenizer_hash(tok_path))
    if args.stage == "all":
        print("staged training: attention_only -> ctc_only -> hybrid", file=sys.stderr)
        ckpt, history = trainer.run_staged_training(
            ckpt,
            task,
            alpha=args.alpha,
            learning_rate=args.lr,
            n_examples=args.examples,
            seed=args.seed,
        )
    else:
        plan = trainer.TrainPlan(
            stage=args.stage,
            alpha=args.alpha,
            learning_rate=args.lr,
            epochs=args.epochs,
        )
        ckpt, history = trainer.train(
            ckpt, task, plan, n_examples=args.examples, seed=args.seed
        )
    for h in history:
        print(
            f"stage={h.stage} epoch={h.epoch} train={h.train_loss:.4f} "
            f"val={h.val_loss:.4f} ter={h.val_token_error_rate:.4f}",
            file=sys.stderr,
        )
    save_checkpoint(ckpt, out)
    log_path = out / "train_log.csv"
    trainer.write_training_log(history, log_path)
    report.save_training_figure(history, out / "training.png")
    print(json.dumps({
        "checkpoint": str(out),
        "tokenizer": str(tok_path),
        "log": str(log_path),
        "final_val_loss": history[-1].val_loss,
        "final_token_error_rate": history[-1].val_token_error_rate,
    }))
    return 0


def cmd_init_model(args) -> int:
    try:
        vocab = load_vocab(args.tokenizer)
    except (OSError, ValueError, KeyError) as e:
        raise DataError(f"cannot load tokenizer {args.tokenizer}: {e}")
    subset = args.subset_size if args.subset_size else min(8000, len(vocab))
    tok = HybridTokenizer(vocab, subset)
    cfg = ModelConfig(
        d_model=args.d_model,
        heads=args.heads,
        enc_layers=args.enc_layers,
        dec_layers=args.dec_layers,
        ffn_dim=args.ffn_dim,
        ctc_vocab=tok.ctc_vocab,
        dec_vocab=tok.dec_vocab,
    )
    ckpt = init_toy(cfg, args.seed, tokenizer_hash=_tokenizer_hash(args.tokenizer))
    save_checkpoint(ckpt, args.out)
    digest = hashlib.sha256(Path(args.out, "weights.bin").read_bytes()).hexdigest()
    print(json.dumps({"checkpoint": str(args.out), "weights_sha256": digest}))
    return 0


def cmd_features(args) -> int:
    try:
        audio = decode_wav(Path(args.audio).read_bytes())
    except OSError as e:
        raise DataError(f"cannot read {args.audio}: {e}")
    except ValueError as e:
        raise DataError(str(e))
    try:
        fm = log_mel(audio)
    except ValueError as e:
        raise DataError(str(e))
    save_features(fm, args.out)
    print(json.dumps({"frames": fm.frames, "bins": fm.bins, "out": str(args.out)}))
    return 0


def cmd_vocab_gen(args) -> int:
    try:
        corpus = Path(args.corpus).read_bytes()
    except OSError as e:
        raise DataError(f"cannot read corpus {args.corpus}: {e}")
    if not corpus:
        raise DataError("empty corpus")
    vocab = train_bpe(corpus, args.size)
    save_vocab(vocab, args.out)
    print(json.dumps({"tokens": len(vocab), "merges": len(vocab.merges),
                      "out": str(args.out)}))
    return 0


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(1)


def _add_session_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--chunk-s", type=float, default=1.0,
                   help="audio chunk size in seconds (default 1.0)")
    p.add_argument("--beam", type=int, default=10,
                   help="prefix beam search size (default 10)")
    p.add_argument("--top-k", type=int, default=6,
                   help="hypotheses to rescore (default 6)")
    p.add_argument("--max-delay", type=float, default=12.0,
                   help="max seconds before forced finalization (default 12)")
    p.add_argument("--silence", type=float, default=0.5,
                   help="trailing silence that endpoints a segment (default 0.5)")
    p.add_argument("--ctc-weight", type=float, default=0.5,
                   help="CTC weight in the fused rescoring score (default 0.5)")
    p.add_argument("--no-quantize", action="store_true",
                   help="disable int8 inference (default: quantization on)")


def _add_model_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--d-model", type=int, default=64)
    p.add_argument("--heads", type=int, default=4)
    p.add_argument("--enc-layers", type=int, default=2)
    p.add_argument("--dec-layers", type=int, default=2)
    p.add_argument("--ffn-dim", type=int, default=128)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="u2stream",
                     description="Streaming two-pass speech recognition engine")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("transcribe", help="stream a WAV file, emit JSONL events")
    p.add_argument("audio")
    p.add_argument("--ckpt", required=True, help="checkpoint directory")
    p.add_argument("--tokenizer", required=True, help="tokenizer JSON")
    _add_session_flags(p)
    p.set_defaults(func=cmd_transcribe)

    p = sub.add_parser("bench", help="WER/RTF/latency over a directory of WAV+txt")
    p.add_argument("--audio-dir", required=True)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--tokenizer", required=True)
    _add_session_flags(p)
    p.add_argument("--sweep-chunk", help="comma list of chunk sizes to sweep")
    p.add_argument("--sweep-max-delay", help="comma list of max delays to sweep")
    p.add_argument("--jobs", type=int, default=1, help="parallel workers")
    p.add_argument("--out-dir", help="write bench.csv and figures here")
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("train-toy", help="staged head training on the synthetic task")
    p.add_argument("--out", required=True, help="output checkpoint directory")
    p.add_argument("--stage", default="all",
                   choices=["all", "attention_only", "ctc_only", "hybrid"])
    p.add_argument("--alpha", type=float, default=0.3,
                   help="CTC weight in the hybrid loss (default 0.3)")
    p.add_argument("--lr", type=float, default=0.05)
    p.add_argument("--epochs", type=int, default=2,
                   help="epochs for a single-stage run")
    p.add_argument("--examples", type=int, default=2000)
    p.add_argument("--seed", type=int, default=7)
    _add_model_flags(p)
    p.set_defaults(func=cmd_train_toy)

    p = sub.add_parser("init-model", help="seeded toy checkpoint")
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--tokenizer", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--subset-size", type=int, default=0,
                   help="CTC token subset (default: min(8000, vocab))")
    _add_model_flags(p)
    p.set_defaults(func=cmd_init_model)

    p = sub.add_parser("features", help="dump log-mel features for a WAV")
    p.add_argument("audio")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_features)

    p = sub.add_parser("vocab-gen", help="train a toy BPE vocabulary")
    p.add_argument("--corpus", required=True)
    p.add_argument("--size", type=int, required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_vocab_gen)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    try:
        return args.func(args)
    except UsageError as e:
        print(f"u2stream: {e}", file=sys.stderr)
        return 1
    except (DataError, CheckpointError) as e:
        print(f"u2stream: {e}", file=sys.stderr)
        return 2
    except ValueError as e:
        print(f"u2stream: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
