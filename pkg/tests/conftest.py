import numpy as np
import pytest

from u2stream import model, trainer
from u2stream.tokenizer import HybridTokenizer


@pytest.fixture(scope="session")
def toy_task():
    return trainer.make_default_task()


@pytest.fixture(scope="session")
def toy_tok(toy_task) -> HybridTokenizer:
    return toy_task.tok


def small_config(tok, **overrides):
    base = dict(
        d_model=32,
        heads=4,
        enc_layers=2,
        dec_layers=2,
        ffn_dim=64,
        ctc_vocab=tok.ctc_vocab,
        dec_vocab=tok.dec_vocab,
    )
    base.update(overrides)
    return model.ModelConfig(**base)


@pytest.fixture(scope="session")
def small_ckpt(toy_tok):
    return model.init_toy(small_config(toy_tok), seed=11)


@pytest.fixture(scope="session")
def trained(toy_task):
    """Seed-7 staged training of the default toy model; shared by the
    session, CLI, and acceptance tests."""
    cfg = model.ModelConfig(
        ctc_vocab=toy_task.tok.ctc_vocab, dec_vocab=toy_task.tok.dec_vocab
    )
    ckpt = model.init_toy(cfg, seed=7)
    ckpt, history = trainer.run_staged_training(
        ckpt, toy_task, n_examples=2000, seed=7
    )
    return ckpt, history


def synth_utterance(task, rng, n_lo=2, n_hi=5, gap=(2, 6)):
    """Random word sequence with its tone audio and reference text."""
    n = int(rng.integers(n_lo, n_hi + 1))
    words = [task.word_ids[int(rng.integers(0, len(task.word_ids)))] for _ in range(n)]
    audio = trainer.synth_audio(task, words, rng, gap_frames=gap)
    ref = " ".join(task.tok.full.tokens[w].decode("ascii").strip() for w in words)
    return words, audio, ref


def run_stream(ckpt, tok, cfg, samples, chunk_samples=None):
    """Feed audio through a fresh session in fixed-size chunks."""
    from u2stream.session import StreamingSession

    sess = StreamingSession(ckpt, tok, cfg)
    step = chunk_samples or int(round(cfg.chunk_size_s * 16000))
    for i in range(0, len(samples), step):
        sess.feed(np.asarray(samples[i : i + step]))
    final, metrics = sess.close()
    return sess.events, final, metrics
