"""Head-scale staged training on a synthetic transcription task.

The task pairs each inventory token with a characteristic mean feature
vector; examples are noisy repetitions of those means separated by
silence-floor gaps, so the CTC blank gets honest training signal. The
training schedule mirrors a staged fine-tune at classification-head
scale: attention head only, then CTC head only, then both heads under
the hybrid loss. Body parameters are never touched.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field, replace

import numpy as np

from . import frontend
from .ctc import attention_ce_loss, ctc_loss_grad, hybrid_loss
from .frontend import HOP, LOG_FLOOR, N_MELS, SAMPLE_RATE, AudioBuffer, FeatureMatrix
from .model import (
    HEAD_CTC,
    HEAD_DEC,
    Checkpoint,
    ChunkMaskSpec,
    decoder_hidden,
    encode_full,
    sample_chunk_frames,
)
from .session import word_errors
from .tokenizer import BpeVocab, HybridTokenizer

NATO_WORDS = [
    "alpha", "bravo", "charlie", "delta", "echo", "foxtrot", "golf",
    "hotel", "india", "juliett", "kilo", "lima", "mike", "november",
    "oscar", "papa", "quebec", "romeo", "sierra", "tango", "uniform",
    "victor", "whiskey", "xray", "yankee", "zulu",
]


def build_toy_vocab() -> tuple[BpeVocab, int, list[int]]:
    """Deterministic word-level BPE vocabulary for the synthetic task.

    Each word gets a chain of merges building the space-prefixed token
    (" alpha", " bravo", ...); those all land inside the restricted
    subset. A handful of word-bigram merges sit above the subset boundary
    so the full space genuinely extends the restricted one.

    Returns (vocab, subset_size, word token ids).
    """
    tokens: list[bytes] = [bytes([i]) for i in range(256)]
    specials = {"sot": 256, "task": 257, "eos": 258}
    tokens += [b"<|sot|>", b"<|task|>", b"<|eos|>"]
    merges: list[tuple[int, int]] = []
    by_bytes = {t: i for i, t in enumerate(tokens)}

    def fuse(left: bytes, right: bytes) -> int:
        joined = left + right
        existing = by_bytes.get(joined)
        if existing is not None:
            return existing
        new_id = len(tokens)
        tokens.append(joined)
        merges.append((by_bytes[left], by_bytes[right]))
        by_bytes[joined] = new_id
        return new_id

    word_ids = []
    for word in NATO_WORDS:
        data = b" " + word.encode("ascii")
        cur = data[:1]
        for k in range(1, len(data)):
            nxt = data[k : k + 1]
            fuse(cur, nxt)
            cur = cur + nxt
        word_ids.append(by_bytes[data])
    subset_size = len(tokens)
    # Full-space-only bigram tokens: only the attention branch can emit these.
    for i in range(0, 16, 2):
        fuse(b" " + NATO_WORDS[i].encode("ascii"), b" " + NATO_WORDS[i + 1].encode("ascii"))
    return BpeVocab(tuple(tokens), tuple(merges), specials), subset_size, word_ids


@dataclass
class SynthTask:
    """Synthetic transcription task over a fixed token inventory.

    Every inventory token emits its mean feature vector for a sampled
    number of frames plus Gaussian noise; tokens are separated by
    silence-floor gaps so blank frames occur naturally. Means derive from
    pure tones (one frequency per token) so matching audio can be
    synthesized for end-to-end runs.
    """

    tok: HybridTokenizer
    word_ids: list[int]  # full-space token ids used as words
    means: np.ndarray  # (n_words, feature_bins)
    tone_freqs: np.ndarray  # Hz per word
    dur_range: tuple[int, int] = (8, 16)  # feature frames per token
    gap_range: tuple[int, int] = (0, 8)  # silence frames between tokens
    len_range: tuple[int, int] = (2, 6)  # tokens per example
    noise_std: float = 0.5
    floor_vec: np.ndarray = field(default=None)

    def __post_init__(self):
        if self.floor_vec is None:
            self.floor_vec = np.full(
                self.means.shape[1], np.log(LOG_FLOOR), dtype=np.float32
            )
        pts = np.concatenate([self.means, self.floor_vec[None, :]])
        dists = np.linalg.norm(pts[:, None, :] - pts[None, :, :], axis=-1)
        np.fill_diagonal(dists, np.inf)
        if dists.min() <= 4.0 * self.noise_std:
            raise ValueError(
                "token means are not separable: min pairwise distance "
                f"{dists.min():.3f} <= 4 * noise_std"
            )


def tone_samples(
    freq: float, n_samples: int, amplitude: float = 0.3, ramp: int = 0
) -> np.ndarray:
    """Pure tone, optionally with raised-cosine fades at both ends.

    The fades keep onset/offset spectral splatter out of neighboring mel
    bins, which matters when tones stand in for speech sounds.
    """
    t = np.arange(n_samples, dtype=np.float64) / SAMPLE_RATE
    x = amplitude * np.sin(2.0 * np.pi * freq * t)
    if ramp > 0 and n_samples >= 2 * ramp:
        envelope = 0.5 - 0.5 * np.cos(np.pi * np.arange(ramp) / ramp)
        x[:ramp] *= envelope
        x[-ramp:] *= envelope[::-1]
    return x.astype(np.float32)


def _tone_mean(freq: float) -> np.ndarray:
    audio = AudioBuffer(tone_samples(freq, SAMPLE_RATE // 2))
    return frontend.log_mel(audio).values.mean(axis=0)


def make_default_task(noise_std: float = 0.5) -> SynthTask:
    """Toy task: 26 word tokens mapped to 26 pure tones."""
    vocab, subset, word_ids = build_toy_vocab()
    tok = HybridTokenizer(vocab, subset)
    freqs = 350.0 + 140.0 * np.arange(len(word_ids))
    means = np.stack([_tone_mean(f) for f in freqs]).astype(np.float32)
    return SynthTask(
        tok=tok,
        word_ids=word_ids,
        means=means,
        tone_freqs=freqs,
        noise_std=noise_std,
    )


def generate_example(
    task: SynthTask, rng: np.random.Generator
) -> tuple[FeatureMatrix, list[int]]:
    """One synthetic utterance: (features, full-space target token ids)."""
    n_tokens = int(rng.integers(task.len_range[0], task.len_range[1] + 1))
    choices = rng.integers(0, len(task.word_ids), size=n_tokens)
    rows = []
    gap_lo, gap_hi = task.gap_range
    lead = int(rng.integers(gap_lo, gap_hi + 1))
    rows.append(np.repeat(task.floor_vec[None, :], lead, axis=0))
    for j, c in enumerate(choices):
        dur = int(rng.integers(task.dur_range[0], task.dur_range[1] + 1))
        rows.append(np.repeat(task.means[c][None, :], dur, axis=0))
        gap = int(rng.integers(gap_lo, gap_hi + 1))
        if gap == 0 and j + 1 < n_tokens and choices[j + 1] == c:
            gap = 1  # repeated tokens need a separating gap to stay decodable
        rows.append(np.repeat(task.floor_vec[None, :], gap, axis=0))
    feats = np.concatenate(rows, axis=0).astype(np.float32)
    if task.noise_std > 0:
        feats = feats + rng.normal(0.0, task.noise_std, size=feats.shape).astype(
            np.float32
        )
    targets = [task.word_ids[c] for c in choices]
    return FeatureMatrix(feats), targets


def synth_audio(
    task: SynthTask,
    targets: list[int],
    rng: np.random.Generator,
    gap_frames: tuple[int, int] | None = None,
) -> np.ndarray:
    """Render tone audio whose log-mel features land near the task means."""
    idx = {w: i for i, w in enumerate(task.word_ids)}
    gap_lo, gap_hi = gap_frames if gap_frames is not None else task.gap_range
    parts = []
    for j, w in enumerate(targets):
        dur = int(rng.integers(task.dur_range[0], task.dur_range[1] + 1))
        parts.append(
            tone_samples(task.tone_freqs[idx[w]], dur * HOP, ramp=HOP)
        )
        gap = int(rng.integers(gap_lo, gap_hi + 1))
        if gap == 0 and j + 1 < len(targets) and targets[j + 1] == w:
            gap = 1  # repeated words need a separating gap to stay decodable
        if gap:
            parts.append(np.zeros(gap * HOP, dtype=np.float32))
    return np.concatenate(parts) if parts else np.zeros(0, dtype=np.float32)


STAGE_ATTENTION = "attention_only"
STAGE_CTC = "ctc_only"
STAGE_HYBRID = "hybrid"
_STAGE_HEADS = {
    STAGE_ATTENTION: HEAD_DEC,
    STAGE_CTC: HEAD_CTC,
    STAGE_HYBRID: HEAD_CTC | HEAD_DEC,
}


@dataclass(frozen=True)
class TrainPlan:
    stage: str
    alpha: float = 0.3
    learning_rate: float = 0.05
    epochs: int = 2
    trainable: frozenset = frozenset()

    def __post_init__(self):
        if self.stage not in _STAGE_HEADS:
            raise ValueError(f"unknown stage '{self.stage}'")
        if not (0.0 <= self.alpha <= 1.0):
            raise ValueError("alpha must lie in [0, 1]")
        expected = _STAGE_HEADS[self.stage]
        if not self.trainable:
            object.__setattr__(self, "trainable", expected)
        elif frozenset(self.trainable) != expected:
            raise ValueError(
                f"stage '{self.stage}' trains exactly {sorted(expected)}"
            )


@dataclass
class EpochStats:
    epoch: int
    stage: str
    train_loss: float
    val_loss: float
    val_token_error_rate: float
    val_ctc_loss: float = float("nan")
    val_att_loss: float = float("nan")


VAL_CHUNK_FRAMES = 25  # fixed 1-second mask for validation passes


def _example_losses(ckpt, task, feats, targets, plan, chunk_frames, want_grads):
    """Forward (and head gradients) for one example under the given stage."""
    enc = encode_full(feats, ChunkMaskSpec(chunk_frames), ckpt)
    out = {}
    if plan.stage in (STAGE_CTC, STAGE_HYBRID):
        logits = enc @ ckpt.params["ctc_head.w"] + ckpt.params["ctc_head.b"]
        ctc_target = [task.tok.shift(t) for t in targets]
        if want_grads:
            l_ctc, g = ctc_loss_grad(logits, ctc_target)
            out["ctc_grads"] = (enc.T @ g, g.sum(axis=0))
        else:
            l_ctc, _ = ctc_loss_grad(logits, ctc_target)
        out["ctc"] = l_ctc
    if plan.stage in (STAGE_ATTENTION, STAGE_HYBRID):
        prompt = task.tok.prompt_ids()
        seq = prompt + list(targets) + [task.tok.eos_id]
        hidden = decoder_hidden(np.asarray(seq[:-1], dtype=np.int64), enc, ckpt)
        sel = hidden[len(prompt) - 1 :]
        logits = sel @ ckpt.params["dec_head.w"] + ckpt.params["dec_head.b"]
        l_att, g = attention_ce_loss(logits, seq[len(prompt) :])
        out["att"] = l_att
        if want_grads:
            out["att_grads"] = (sel.T @ g, g.sum(axis=0))
    if plan.stage == STAGE_CTC:
        out["loss"] = out["ctc"]
    elif plan.stage == STAGE_ATTENTION:
        out["loss"] = out["att"]
    else:
        out["loss"] = hybrid_loss(out["ctc"], out["att"], plan.alpha)
    return out


def greedy_token_error(ckpt, task, feats, targets) -> tuple[int, int]:
    """Edit distance of the greedy CTC collapse against the target ids."""
    enc = encode_full(feats, ChunkMaskSpec(VAL_CHUNK_FRAMES), ckpt)
    logits = enc @ ckpt.params["ctc_head.w"] + ckpt.params["ctc_head.b"]
    path = logits.argmax(axis=-1)
    collapsed = []
    prev = -1
    for p in path:
        if p != prev and p != 0:
            collapsed.append(task.tok.unshift(int(p)))
        prev = p
    ref = " ".join(str(t) for t in targets)
    hyp = " ".join(str(t) for t in collapsed)
    return word_errors(ref, hyp)


def _val_examples(task, seed: int, count: int):
    return [
        generate_example(task, np.random.default_rng([seed, 999_983, i]))
        for i in range(count)
    ]


def train(
    ckpt: Checkpoint,
    task: SynthTask,
    plan: TrainPlan,
    n_examples: int = 2000,
    val_size: int = 100,
    seed: int = 0,
) -> tuple[Checkpoint, list[EpochStats]]:
    """Run one training stage with plain SGD on the selected heads.

    Per-example chunk masks are sampled afresh (streaming-consistent
    training); body parameters are shared with the input checkpoint and
    never written. Returns the updated checkpoint and per-epoch stats.
    """
    params = dict(ckpt.params)
    for name in plan.trainable:
        params[name] = params[name].copy()
    cur = replace(ckpt, params=params)

    val_set = _val_examples(task, seed, val_size)
    history: list[EpochStats] = []
    lr = plan.learning_rate
    for epoch in range(1, plan.epochs + 1):
        total = 0.0
        for i in range(n_examples):
            rng = np.random.default_rng([seed, epoch, i])
            feats, targets = generate_example(task, rng)
            chunk = sample_chunk_frames(rng, cur.config)
            res = _example_losses(cur, task, feats, targets, plan, chunk, True)
            loss = res["loss"]
            if not np.isfinite(loss):
                raise RuntimeError(
                    f"non-finite {plan.stage} loss at epoch {epoch} example {i}"
                )
            total += loss
            scale_ctc = plan.alpha if plan.stage == STAGE_HYBRID else 1.0
            scale_att = (1.0 - plan.alpha) if plan.stage == STAGE_HYBRID else 1.0
            if "ctc_grads" in res and "ctc_head.w" in plan.trainable:
                gw, gb = res["ctc_grads"]
                params["ctc_head.w"] = (
                    params["ctc_head.w"] - lr * scale_ctc * gw
                ).astype(np.float32)
                params["ctc_head.b"] = (
                    params["ctc_head.b"] - lr * scale_ctc * gb
                ).astype(np.float32)
            if "att_grads" in res and "dec_head.w" in plan.trainable:
                gw, gb = res["att_grads"]
                params["dec_head.w"] = (
                    params["dec_head.w"] - lr * scale_att * gw
                ).astype(np.float32)
                params["dec_head.b"] = (
                    params["dec_head.b"] - lr * scale_att * gb
                ).astype(np.float32)
        stats = evaluate(cur, task, plan, val_set)
        stats.epoch = epoch
        stats.train_loss = total / max(1, n_examples)
        history.append(stats)
    return cur, history


def evaluate(ckpt, task, plan: TrainPlan, val_set) -> EpochStats:
    """Validation losses and greedy token error rate on a fixed set."""
    ctc_sum = att_sum = 0.0
    n_ctc = n_att = 0
    errs = words = 0
    for feats, targets in val_set:
        res = _example_losses(
            ckpt, task, feats, targets, plan, VAL_CHUNK_FRAMES, False
        )
        if "ctc" in res:
            ctc_sum += res["ctc"]
            n_ctc += 1
        if "att" in res:
            att_sum += res["att"]
            n_att += 1
        e, w = greedy_token_error(ckpt, task, feats, targets)
        errs += e
        words += w
    val_ctc = ctc_sum / n_ctc if n_ctc else float("nan")
    val_att = att_sum / n_att if n_att else float("nan")
    if plan.stage == STAGE_CTC:
        val_loss = val_ctc
    elif plan.stage == STAGE_ATTENTION:
        val_loss = val_att
    else:
        # the hybrid aggregate is derived from the part aggregates, so the
        # accounting identity holds exactly
        val_loss = hybrid_loss(val_ctc, val_att, plan.alpha)
    return EpochStats(
        epoch=0,
        stage=plan.stage,
        train_loss=float("nan"),
        val_loss=val_loss,
        val_token_error_rate=errs / max(1, words),
        val_ctc_loss=val_ctc,
        val_att_loss=val_att,
    )


def write_training_log(history: list[EpochStats], path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f)
        w.writerow(["epoch", "stage", "train_loss", "val_loss", "val_token_error_rate"])
        for h in history:
            w.writerow(
                [h.epoch, h.stage, f"{h.train_loss:.6f}", f"{h.val_loss:.6f}",
                 f"{h.val_token_error_rate:.6f}"]
            )


def run_staged_training(
    ckpt: Checkpoint,
    task: SynthTask,
    alpha: float = 0.3,
    learning_rate: float = 0.05,
    n_examples: int = 2000,
    seed: int = 7,
    stage_epochs: tuple[int, int, int] = (1, 2, 2),
) -> tuple[Checkpoint, list[EpochStats]]:
    """Attention head first, then CTC head, then both under the hybrid loss."""
    history: list[EpochStats] = []
    stages = (
        (STAGE_ATTENTION, stage_epochs[0]),
        (STAGE_CTC, stage_epochs[1]),
        (STAGE_HYBRID, stage_epochs[2]),
    )
    cur = ckpt
    for stage, epochs in stages:
        plan = TrainPlan(
            stage=stage, alpha=alpha, learning_rate=learning_rate, epochs=epochs
        )
        cur, hist = train(
            cur, task, plan, n_examples=n_examples, seed=seed
        )
        history.extend(hist)
    return cur, history
