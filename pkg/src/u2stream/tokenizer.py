"""Byte-pair-encoding tokenizer with a restricted/full hybrid scheme.

A single BPE vocabulary serves two decoders: the CTC branch sees only the
first ``subset_size`` token ids (shifted by one to make room for blank at
index 0), while the attention branch sees the whole vocabulary. The
retokenizer bridges the two spaces by decoding restricted ids to bytes and
re-encoding without the restriction.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

SPECIAL_NAMES = ("sot", "task", "eos")


@dataclass(frozen=True)
class BpeVocab:
    """Ordered token inventory plus ranked merge rules.

    tokens[i] is the byte string of id i; ids 0..255 are the single bytes,
    so any byte string tokenizes. Merges are (left_id, right_id) pairs in
    rank order; the result id is the id of the concatenated byte string
    and must come in ascending order (BPE creates ids in rank order).
    """

    tokens: tuple[bytes, ...]
    merges: tuple[tuple[int, int], ...]
    specials: dict[str, int]
    _ranks: dict = field(default=None, repr=False, compare=False)
    _special_ids: frozenset = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        n = len(self.tokens)
        if n < 256:
            raise ValueError("vocab must contain the 256 single-byte tokens")
        for i in range(256):
            if self.tokens[i] != bytes([i]):
                raise ValueError(f"token {i} is not the single byte {i}")
        seen: dict[bytes, int] = {}
        for i, tok in enumerate(self.tokens):
            if tok in seen:
                raise ValueError(f"duplicate token bytes at ids {seen[tok]} and {i}")
            seen[tok] = i
        for name, sid in self.specials.items():
            if not (256 <= sid < n):
                raise ValueError(f"special '{name}' id {sid} outside vocabulary")
        ranks = {}
        prev_result = -1
        for rank, (a, b) in enumerate(self.merges):
            if not (0 <= a < n and 0 <= b < n):
                raise ValueError(f"merge {rank} references unknown token ids ({a},{b})")
            result = seen.get(self.tokens[a] + self.tokens[b])
            if result is None:
                raise ValueError(f"merge {rank} result bytes not in vocabulary")
            if result <= prev_result:
                raise ValueError("merge result ids must be strictly ascending")
            prev_result = result
            ranks[(a, b)] = (rank, result)
        object.__setattr__(self, "_ranks", ranks)
        object.__setattr__(self, "_special_ids", frozenset(self.specials.values()))

    def __len__(self) -> int:
        return len(self.tokens)


def encode(vocab: BpeVocab, text: bytes | str, max_id: int | None = None) -> list[int]:
    """Greedy lowest-rank-first BPE encoding.

    Merges whose result id is >= max_id are skipped, which realizes
    restricted-subset encoding; byte fallback makes the function total.
    """
    if isinstance(text, str):
        text = text.encode("utf-8")
    ids = list(text)
    ranks = vocab._ranks
    while len(ids) >= 2:
        best = None
        for pair in zip(ids, ids[1:]):
            entry = ranks.get(pair)
            if entry is None:
                continue
            rank, result = entry
            if max_id is not None and result >= max_id:
                continue
            if best is None or rank < best[0]:
                best = (rank, result, pair)
        if best is None:
            break
        _, result, pair = best
        out = []
        i = 0
        while i < len(ids):
            if i + 1 < len(ids) and (ids[i], ids[i + 1]) == pair:
                out.append(result)
                i += 2
            else:
                out.append(ids[i])
                i += 1
        ids = out
    return ids


def decode(vocab: BpeVocab, ids) -> bytes:
    """Concatenate token byte strings; special tokens decode to nothing."""
    parts = []
    for i in ids:
        if not (0 <= i < len(vocab.tokens)):
            raise ValueError(f"decode: token id {i} out of range")
        if i in vocab._special_ids:
            continue
        parts.append(vocab.tokens[i])
    return b"".join(parts)


def decode_text(vocab: BpeVocab, ids) -> str:
    return decode(vocab, ids).decode("utf-8", errors="replace")


def save_vocab(vocab: BpeVocab, path) -> None:
    doc = {
        "tokens": [t.hex() for t in vocab.tokens],
        "merges": [list(m) for m in vocab.merges],
        "specials": dict(vocab.specials),
    }
    with open(path, "w", encoding="utf-8") as f:
        json.dump(doc, f)


def load_vocab(path) -> BpeVocab:
    with open(path, "r", encoding="utf-8") as f:
        doc = json.load(f)
    return BpeVocab(
        tokens=tuple(bytes.fromhex(t) for t in doc["tokens"]),
        merges=tuple((int(a), int(b)) for a, b in doc["merges"]),
        specials={str(k): int(v) for k, v in doc["specials"].items()},
    )


def train_bpe(corpus: bytes | str, vocab_size: int) -> BpeVocab:
    """Learn a toy BPE vocabulary from a corpus by iterative pair merging.

    Ids 0..255 are bytes, the three specials follow, and merge results
    fill the rest up to vocab_size. Ties on pair counts break
    deterministically toward the smallest id pair.
    """
    if isinstance(corpus, str):
        corpus = corpus.encode("utf-8")
    tokens = [bytes([i]) for i in range(256)]
    specials = {}
    for name in SPECIAL_NAMES:
        specials[name] = len(tokens)
        tokens.append(f"<|{name}|>".encode("utf-8"))
    if vocab_size < len(tokens):
        raise ValueError(f"vocab_size must be at least {len(tokens)}")
    merges: list[tuple[int, int]] = []
    ids = list(corpus)
    existing = set(tokens)
    while len(tokens) < vocab_size:
        counts: dict[tuple[int, int], int] = {}
        for pair in zip(ids, ids[1:]):
            counts[pair] = counts.get(pair, 0) + 1
        candidates = [
            (cnt, pair)
            for pair, cnt in counts.items()
            if cnt > 1 and tokens[pair[0]] + tokens[pair[1]] not in existing
        ]
        if not candidates:
            break
        _, pair = max(candidates, key=lambda cp: (cp[0], (-cp[1][0], -cp[1][1])))
        new_id = len(tokens)
        new_bytes = tokens[pair[0]] + tokens[pair[1]]
        tokens.append(new_bytes)
        existing.add(new_bytes)
        merges.append(pair)
        out = []
        i = 0
        while i < len(ids):
            if i + 1 < len(ids) and (ids[i], ids[i + 1]) == pair:
                out.append(new_id)
                i += 2
            else:
                out.append(ids[i])
                i += 1
        ids = out
    return BpeVocab(tuple(tokens), tuple(merges), specials)


BLANK_ID = 0


@dataclass(frozen=True)
class HybridTokenizer:
    """Restricted CTC token space paired with the full decoder space.

    CTC output index 0 is blank; full-vocabulary id i (for i below
    subset_size) maps to CTC index i + 1.
    """

    full: BpeVocab
    subset_size: int = 8000

    def __post_init__(self):
        floor = 256 + len(self.full.specials)
        if self.subset_size < floor:
            raise ValueError(f"subset_size must be at least {floor}")
        if self.subset_size > len(self.full):
            raise ValueError("subset_size exceeds vocabulary size")

    @property
    def ctc_vocab(self) -> int:
        return self.subset_size + 1

    @property
    def dec_vocab(self) -> int:
        return len(self.full)

    def shift(self, full_id: int) -> int:
        if not (0 <= full_id < self.subset_size):
            raise ValueError(f"full id {full_id} outside subset")
        return full_id + 1

    def unshift(self, ctc_id: int) -> int:
        if not (1 <= ctc_id <= self.subset_size):
            raise ValueError(f"ctc id {ctc_id} out of range (blank is {BLANK_ID})")
        return ctc_id - 1

    def encode_ctc(self, text: bytes | str) -> list[int]:
        return [i + 1 for i in encode(self.full, text, max_id=self.subset_size)]

    def decode_ctc(self, ctc_ids) -> bytes:
        return decode(self.full, [self.unshift(i) for i in ctc_ids])

    def decode_ctc_text(self, ctc_ids) -> str:
        return self.decode_ctc(ctc_ids).decode("utf-8", errors="replace")

    def prompt_ids(self) -> list[int]:
        return [self.full.specials["sot"], self.full.specials["task"]]

    @property
    def eos_id(self) -> int:
        return self.full.specials["eos"]

    def retokenize(self, ctc_ids, prompt: list[int] | None = None) -> list[int]:
        """Bridge a CTC hypothesis into the decoder's token space.

        Decodes the restricted ids to bytes, re-encodes with the full
        vocabulary, and wraps the result in prompt and end-of-sequence
        tokens. Content token count never exceeds the input count because
        the full vocabulary only adds merges on top of the subset.
        """
        if any(i == BLANK_ID for i in ctc_ids):
            raise ValueError("retokenize: blank id in hypothesis")
        text = self.decode_ctc(ctc_ids)
        if prompt is None:
            prompt = self.prompt_ids()
        return list(prompt) + encode(self.full, text) + [self.eos_id]
