import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from u2stream import tokenizer as tk
from u2stream.tokenizer import (
    BpeVocab,
    HybridTokenizer,
    decode,
    encode,
    load_vocab,
    save_vocab,
    train_bpe,
)
from u2stream.trainer import build_toy_vocab


def make_tiny_vocab():
    """Bytes + specials + a single merge ("a","b") -> id 259."""
    tokens = [bytes([i]) for i in range(256)]
    specials = {"sot": 256, "task": 257, "eos": 258}
    tokens += [b"<|sot|>", b"<|task|>", b"<|eos|>"]
    tokens.append(b"ab")
    return BpeVocab(tuple(tokens), ((97, 98),), specials)


class TestEncodeDecode:
    def test_empty(self):
        v = make_tiny_vocab()
        assert encode(v, "") == []
        assert decode(v, []) == b""

    def test_single_byte(self):
        v = make_tiny_vocab()
        assert encode(v, "a") == [97]
        assert encode(v, "a", max_id=256) == [97]

    def test_merge_applied_and_skipped(self):
        v = make_tiny_vocab()
        assert encode(v, "ab") == [259]
        assert encode(v, "ab", max_id=256) == [97, 98]

    def test_decode_pair(self):
        v = make_tiny_vocab()
        assert decode(v, [97, 98]) == b"ab"
        assert decode(v, [259]) == b"ab"

    def test_specials_decode_empty(self):
        v = make_tiny_vocab()
        assert decode(v, [256, 97, 258]) == b"a"

    def test_out_of_range_rejected(self):
        v = make_tiny_vocab()
        with pytest.raises(ValueError, match="out of range"):
            decode(v, [2600])

    @settings(max_examples=200, deadline=None)
    @given(st.binary(min_size=0, max_size=64), st.sampled_from([256, 300, None]))
    def test_round_trip_any_bytes(self, data, max_id):
        v = make_tiny_vocab()
        assert decode(v, encode(v, data, max_id=max_id)) == data

    def test_round_trip_toy_vocab_random(self):
        vocab, subset, _ = build_toy_vocab()
        rng = np.random.default_rng(0)
        for _ in range(200):
            n = int(rng.integers(0, 40))
            data = bytes(rng.integers(0, 256, size=n).tolist())
            assert decode(vocab, encode(vocab, data)) == data
            assert decode(vocab, encode(vocab, data, max_id=subset)) == data


class TestVocabValidation:
    def test_byte_prefix_required(self):
        tokens = [bytes([i]) for i in range(255)] + [b"zz"]
        with pytest.raises(ValueError):
            BpeVocab(tuple(tokens), (), {})

    def test_merge_must_resolve(self):
        tokens = [bytes([i]) for i in range(256)]
        with pytest.raises(ValueError, match="result bytes"):
            BpeVocab(tuple(tokens), ((97, 98),), {})

    def test_special_outside_byte_range(self):
        tokens = [bytes([i]) for i in range(256)]
        with pytest.raises(ValueError):
            BpeVocab(tuple(tokens), (), {"sot": 10})


class TestVocabFile:
    def test_json_round_trip(self, tmp_path):
        vocab, _, _ = build_toy_vocab()
        path = tmp_path / "vocab.json"
        save_vocab(vocab, path)
        back = load_vocab(path)
        assert back.tokens == vocab.tokens
        assert back.merges == vocab.merges
        assert back.specials == vocab.specials

    def test_train_bpe_learns_merges(self):
        words = ["the", "cat", "sat", "on", "mat", "dog", "ran", "far", "big", "sun"]
        rng = np.random.default_rng(3)
        corpus = " ".join(words[i] for i in rng.integers(0, 10, size=2000)).encode()
        vocab = train_bpe(corpus, 300)
        assert 259 < len(vocab) <= 300
        text = b"the cat"
        ids = encode(vocab, text)
        assert len(ids) < len(text)  # merges actually compress
        assert decode(vocab, ids) == text

    def test_train_bpe_deterministic(self):
        corpus = b"abcabcabc" * 30
        a = train_bpe(corpus, 265)
        b = train_bpe(corpus, 265)
        assert a.tokens == b.tokens and a.merges == b.merges


class TestHybridTokenizer:
    def test_shift_bijection(self):
        vocab, subset, _ = build_toy_vocab()
        h = HybridTokenizer(vocab, subset)
        for i in range(0, subset, 7):
            assert h.unshift(h.shift(i)) == i
        with pytest.raises(ValueError):
            h.shift(subset)
        with pytest.raises(ValueError):
            h.unshift(0)  # blank has no full-space image

    def test_ctc_vocab_dimension(self):
        vocab, subset, _ = build_toy_vocab()
        h = HybridTokenizer(vocab, subset)
        assert h.ctc_vocab == subset + 1

    def test_subset_size_floor(self):
        vocab, _, _ = build_toy_vocab()
        with pytest.raises(ValueError):
            HybridTokenizer(vocab, 258)
        with pytest.raises(ValueError):
            HybridTokenizer(vocab, len(vocab) + 1)

    def test_retokenize_empty(self):
        vocab, subset, _ = build_toy_vocab()
        h = HybridTokenizer(vocab, subset)
        assert h.retokenize([]) == h.prompt_ids() + [h.eos_id]

    def test_retokenize_rejects_blank(self):
        vocab, subset, _ = build_toy_vocab()
        h = HybridTokenizer(vocab, subset)
        with pytest.raises(ValueError, match="blank"):
            h.retokenize([0, 5])

    def test_retokenize_fixed_point(self):
        # text whose full encoding equals its subset encoding passes through
        v = make_tiny_vocab()
        h = HybridTokenizer(v, 259)  # merge result 259 is full-only
        ctc_ids = h.encode_ctc("xy")
        out = h.retokenize(ctc_ids)
        assert out == h.prompt_ids() + [120, 121] + [h.eos_id]

    def test_retokenize_fuses_full_only_merge(self):
        v = make_tiny_vocab()
        h = HybridTokenizer(v, 259)
        ctc_ids = h.encode_ctc("ab")  # subset encoding: two bytes
        assert [h.unshift(i) for i in ctc_ids] == [97, 98]
        out = h.retokenize(ctc_ids)
        assert out == h.prompt_ids() + [259] + [h.eos_id]

    def test_retokenize_toy_word_pair(self):
        vocab, subset, word_ids = build_toy_vocab()
        h = HybridTokenizer(vocab, subset)
        ctc_ids = h.encode_ctc(" alpha bravo")
        assert all(h.unshift(i) in word_ids for i in ctc_ids)
        out = h.retokenize(ctc_ids)
        content = out[2:-1]
        assert len(content) == 1  # the full-only bigram token
        assert vocab.tokens[content[0]] == b" alpha bravo"

    def test_retokenize_never_longer(self):
        vocab, subset, _ = build_toy_vocab()
        h = HybridTokenizer(vocab, subset)
        rng = np.random.default_rng(1)
        for _ in range(300):
            n = int(rng.integers(0, 30))
            data = bytes(rng.integers(0, 256, size=n).tolist())
            ctc_ids = h.encode_ctc(data)
            out = h.retokenize(ctc_ids)
            content = out[len(h.prompt_ids()) : -1]
            assert len(content) <= len(ctc_ids)

    def test_decode_ctc_round_trip(self):
        vocab, subset, _ = build_toy_vocab()
        h = HybridTokenizer(vocab, subset)
        text = b" kilo lima mike"
        assert h.decode_ctc(h.encode_ctc(text)) == text
