"""Word-level tokenizer with a frequency-ranked vocabulary."""

from __future__ import annotations

import unicodedata
from collections import Counter
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import EmptyCorpus

PAD, BOS, EOS, UNK = 0, 1, 2, 3
SPECIAL_TOKENS = ("<pad>", "<bos>", "<eos>", "<unk>")
DEFAULT_CONTEXT_LENGTH = 77


def _is_punct(ch: str) -> bool:
    return unicodedata.category(ch).startswith("P") or unicodedata.category(ch).startswith("S")


def normalize_tokens(text: str) -> list[str]:
    """Lowercase, split on whitespace, strip leading/trailing punctuation per word."""
    out = []
    for raw in text.lower().split():
        start, end = 0, len(raw)
        while start < end and _is_punct(raw[start]):
            start += 1
        while end > start and _is_punct(raw[end - 1]):
            end -= 1
        if start < end:
            out.append(raw[start:end])
    return out


@dataclass(frozen=True)
class Vocabulary:
    tokens: tuple[str, ...]

    def __post_init__(self):
        if self.tokens[:4] != SPECIAL_TOKENS:
            raise ValueError("vocabulary must start with the special tokens")
        if len(set(self.tokens)) != len(self.tokens):
            raise ValueError("vocabulary tokens must be unique")
        object.__setattr__(self, "_index", {t: i for i, t in enumerate(self.tokens)})

    def __len__(self) -> int:
        return len(self.tokens)

    def id(self, token: str) -> int:
        return self._index.get(token, UNK)

    def save(self, path: str | Path) -> None:
        Path(path).write_text("\n".join(self.tokens) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "Vocabulary":
        lines = Path(path).read_text(encoding="utf-8").split("\n")
        if lines and lines[-1] == "":
            lines.pop()
        return cls(tuple(lines))


def build_vocab(corpus: Iterable[str], max_size: int = 10000) -> Vocabulary:
    if max_size < len(SPECIAL_TOKENS):
        raise ValueError(f"max_size must be >= {len(SPECIAL_TOKENS)}")
    counts: Counter[str] = Counter()
    seen = False
    for text in corpus:
        seen = True
        counts.update(normalize_tokens(text))
    if not seen:
        raise EmptyCorpus("cannot build a vocabulary from an empty corpus")
    ranked = sorted((t for t in counts if t not in SPECIAL_TOKENS), key=lambda t: (-counts[t], t))
    return Vocabulary(SPECIAL_TOKENS + tuple(ranked[: max_size - len(SPECIAL_TOKENS)]))


def encode(text: str, vocab: Vocabulary, context_length: int = DEFAULT_CONTEXT_LENGTH) -> np.ndarray:
    if context_length < 2:
        raise ValueError("context_length must be >= 2")
    ids = [vocab.id(t) for t in normalize_tokens(text)][: context_length - 2]
    out = np.full(context_length, PAD, dtype=np.int64)
    out[0] = BOS
    out[1:1 + len(ids)] = ids
    out[1 + len(ids)] = EOS
    return out


def encode_batch(texts: Sequence[str], vocab: Vocabulary,
                 context_length: int = DEFAULT_CONTEXT_LENGTH) -> np.ndarray:
    return np.stack([encode(t, vocab, context_length) for t in texts]) if texts else \
        np.zeros((0, context_length), dtype=np.int64)


def decode(ids: Sequence[int], vocab: Vocabulary) -> list[str]:
    """Tokens between BOS and the first EOS."""
    out = []
    for i in list(ids)[1:]:
        if i == EOS:
            break
        out.append(vocab.tokens[i])
    return out
