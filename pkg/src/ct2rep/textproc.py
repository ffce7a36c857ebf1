"""Word-level tokenizer and vocabulary for findings text."""

from __future__ import annotations

import json
import re
from collections import Counter
from pathlib import Path

PAD, BOS, EOS, UNK = 0, 1, 2, 3
RESERVED = ("<pad>", "<bos>", "<eos>", "<unk>")
MAX_TOKENS = 300

_PUNCT = re.compile(r"([.,;:()/])")


class VocabError(ValueError):
    pass


class DecodeError(ValueError):
    pass


def tokenize(text: str) -> list[str]:
    """Lowercase, isolate ``. , ; : ( ) /`` and split on whitespace."""
    return _PUNCT.sub(r" \1 ", text.lower()).split()


def canonical(text: str) -> str:
    return " ".join(tokenize(text))


class Vocabulary:
    def __init__(self, tokens):
        tokens = list(tokens)
        if tuple(tokens[: len(RESERVED)]) != RESERVED:
            raise VocabError("vocabulary must start with the reserved tokens")
        if len(set(tokens)) != len(tokens):
            raise VocabError("duplicate tokens in vocabulary")
        self.itos = tokens
        self.stoi = {t: i for i, t in enumerate(tokens)}

    def __len__(self):
        return len(self.itos)

    def __contains__(self, token):
        return token in self.stoi

    def __eq__(self, other):
        return isinstance(other, Vocabulary) and self.itos == other.itos

    def id(self, token: str) -> int:
        return self.stoi.get(token, UNK)

    def to_json(self) -> str:
        return json.dumps(self.itos)

    def save(self, path):
        Path(path).write_text(self.to_json())

    @classmethod
    def load(cls, path) -> "Vocabulary":
        return cls(json.loads(Path(path).read_text()))


def build_vocab(corpus, min_count: int = 1) -> Vocabulary:
    """Tokens with count >= ``min_count``, ordered by frequency then lexicographically."""
    if min_count < 1:
        raise VocabError("min_count must be >= 1")
    corpus = list(corpus)
    if not corpus:
        raise VocabError("cannot build a vocabulary from an empty corpus")
    counts = Counter(tok for text in corpus for tok in tokenize(text))
    kept = sorted((t for t, c in counts.items() if c >= min_count and t not in RESERVED),
                  key=lambda t: (-counts[t], t))
    return Vocabulary(list(RESERVED) + kept)


def encode_report(text: str, vocab: Vocabulary) -> list[int]:
    return [BOS] + [vocab.id(t) for t in tokenize(text)] + [EOS]


def decode_tokens(ids, vocab: Vocabulary) -> str:
    """Inverse of :func:`encode_report`; stops at EOS and drops PAD/BOS."""
    words = []
    for i in ids:
        i = int(i)
        if not 0 <= i < len(vocab):
            raise DecodeError(f"token id {i} outside vocabulary of size {len(vocab)}")
        if i == EOS:
            break
        if i in (PAD, BOS):
            continue
        words.append(vocab.itos[i])
    return " ".join(words)
