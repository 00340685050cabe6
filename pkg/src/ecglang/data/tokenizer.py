"""Whitespace tokenizer with sentence spans and a fixed special-token block."""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from typing import Iterable, Sequence

PAD, UNK, BOS, EOS, CLS, MASK = "<pad>", "<unk>", "<bos>", "<eos>", "<cls>", "<mask>"
SPECIALS = (PAD, UNK, BOS, EOS, CLS, MASK)
PAD_ID, UNK_ID, BOS_ID, EOS_ID, CLS_ID, MASK_ID = range(len(SPECIALS))

_NON_WORD = re.compile(r"[^a-z0-9\s]+")


def normalize_sentence(text: str) -> list[str]:
    """Lowercase, drop punctuation and special characters, split on whitespace."""
    return _NON_WORD.sub(" ", text.lower()).split()


def normalize(text: str) -> str:
    return " ".join(normalize_sentence(text))


def split_sentences(text: str) -> list[list[str]]:
    """Sentence boundaries come from periods, found before punctuation is stripped."""
    sentences = [normalize_sentence(part) for part in text.split(".")]
    return [s for s in sentences if s]


@dataclass(frozen=True)
class Vocab:
    tokens: tuple[str, ...]
    index: dict = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if tuple(self.tokens[: len(SPECIALS)]) != SPECIALS:
            raise ValueError("vocabulary must start with the special tokens")
        object.__setattr__(self, "index", {t: i for i, t in enumerate(self.tokens)})

    @classmethod
    def build(cls, texts: Iterable[str]) -> "Vocab":
        words = sorted({w for t in texts for w in normalize_sentence(t)})
        return cls(SPECIALS + tuple(w for w in words if w not in SPECIALS))

    def __len__(self) -> int:
        return len(self.tokens)

    def id(self, word: str) -> int:
        return self.index.get(word, UNK_ID)


@dataclass(frozen=True)
class TextReport:
    """Token ids ``<bos> w1 .. wN <eos>``; spans are ``[start, end)`` positions into ``token_ids``."""

    token_ids: tuple[int, ...]
    sentence_spans: tuple[tuple[int, int], ...]
    raw_text: str

    @property
    def n_words(self) -> int:
        return max(len(self.token_ids) - 2, 0)

    @property
    def n_sentences(self) -> int:
        return len(self.sentence_spans)


def tokenize(raw_text: str, vocab: Vocab) -> TextReport:
    ids = [BOS_ID]
    spans = []
    for words in split_sentences(raw_text):
        start = len(ids)
        ids.extend(vocab.id(w) for w in words)
        spans.append((start, len(ids)))
    ids.append(EOS_ID)
    return TextReport(tuple(ids), tuple(spans), raw_text)


def detokenize(report: TextReport, vocab: Vocab) -> str:
    return " ".join(vocab.tokens[i] for i in strip_specials(report.token_ids))


def strip_specials(ids: Sequence[int]) -> list[int]:
    return [i for i in ids if i >= len(SPECIALS) or i == UNK_ID]
