"""Word-level tokenizer: frequency-ranked vocabulary, fixed-length sequences.

Text is lowercased, stripped of punctuation, and split on whitespace.
Sequences are wrapped in CLS/SEP and padded or truncated to a fixed
length with a matching attention mask.
"""
from __future__ import annotations

import string
from collections import Counter
from dataclasses import dataclass
from typing import Iterable

import numpy as np

from .errors import CorpusError

PAD_ID = 0
UNK_ID = 1
CLS_ID = 2
SEP_ID = 3
NUM_RESERVED = 4

_PUNCT_TABLE = str.maketrans("", "", string.punctuation)


def normalize(text: str) -> list[str]:
    """Lowercase, drop punctuation characters, split on whitespace."""
    words = (w.translate(_PUNCT_TABLE) for w in text.lower().split())
    return [w for w in words if w]


class Vocab:
    """Token-to-id mapping with ids dense in [0, size); ids >= 4 are content."""

    def __init__(self, tokens: list[str]):
        self._token_to_id = {tok: NUM_RESERVED + i for i, tok in enumerate(tokens)}
        if len(self._token_to_id) != len(tokens):
            raise CorpusError("duplicate token in vocabulary")
        self._tokens = list(tokens)

    @property
    def size(self) -> int:
        return NUM_RESERVED + len(self._tokens)

    def id_of(self, token: str) -> int:
        return self._token_to_id.get(token, UNK_ID)

    def token_of(self, token_id: int) -> str:
        return self._tokens[token_id - NUM_RESERVED]

    def __contains__(self, token: str) -> bool:
        return token in self._token_to_id

    def __eq__(self, other) -> bool:
        return isinstance(other, Vocab) and self._tokens == other._tokens

    def save(self, path) -> None:
        """One token per line; line number == id - 4."""
        with open(path, "w", encoding="utf-8") as fh:
            for tok in self._tokens:
                fh.write(tok + "\n")

    @classmethod
    def load(cls, path) -> "Vocab":
        with open(path, encoding="utf-8") as fh:
            return cls([line.rstrip("\n") for line in fh if line.rstrip("\n")])


def build_vocab(corpus: Iterable[str], max_vocab: int) -> Vocab:
    """Top (max_vocab - 4) tokens by frequency, ties broken lexicographically.

    max_vocab == 4 yields a reserved-only vocabulary (every word maps to UNK).
    """
    if max_vocab < NUM_RESERVED:
        raise CorpusError(f"max_vocab must be >= {NUM_RESERVED}, got {max_vocab}")
    counts: Counter[str] = Counter()
    n_texts = 0
    for text in corpus:
        n_texts += 1
        counts.update(normalize(text))
    if n_texts == 0:
        raise CorpusError("cannot build a vocabulary from an empty corpus")
    ranked = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))
    return Vocab([tok for tok, _ in ranked[: max_vocab - NUM_RESERVED]])


def tokenize(text: str, vocab: Vocab) -> list[int]:
    """CLS + content ids (UNK for out-of-vocab) + SEP."""
    return [CLS_ID] + [vocab.id_of(w) for w in normalize(text)] + [SEP_ID]


@dataclass(frozen=True)
class TokenSequence:
    """Fixed-length id sequence with a 0/1 attention mask."""

    ids: tuple[int, ...]
    attention_mask: tuple[int, ...]

    def __post_init__(self):
        assert len(self.ids) == len(self.attention_mask)


def pad_truncate(ids: list[int], max_len: int) -> TokenSequence:
    """Pad with PAD/mask-0 up to max_len, or keep the first max_len-1 ids + SEP."""
    if max_len < 2:
        raise CorpusError(f"max_len must be >= 2, got {max_len}")
    if len(ids) > max_len:
        ids = ids[: max_len - 1] + [SEP_ID]
    mask = [1] * len(ids) + [0] * (max_len - len(ids))
    ids = ids + [PAD_ID] * (max_len - len(ids))
    return TokenSequence(tuple(ids), tuple(mask))


def encode_text(text: str, vocab: Vocab, max_len: int) -> TokenSequence:
    return pad_truncate(tokenize(text, vocab), max_len)


@dataclass(frozen=True)
class TokenBatch:
    """Stacked token sequences: int id matrix and 0/1 mask, both [N x L]."""

    ids: np.ndarray
    mask: np.ndarray

    def __len__(self) -> int:
        return self.ids.shape[0]


def batch_sequences(seqs: list[TokenSequence]) -> TokenBatch:
    ids = np.array([s.ids for s in seqs], dtype=np.int64)
    mask = np.array([s.attention_mask for s in seqs], dtype=np.int64)
    return TokenBatch(ids, mask)


def encode_batch(texts: list[str], vocab: Vocab, max_len: int) -> TokenBatch:
    return batch_sequences([encode_text(t, vocab, max_len) for t in texts])
