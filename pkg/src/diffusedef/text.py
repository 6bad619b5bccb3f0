"""Vocabulary, tokenization and JSONL dataset IO."""

from __future__ import annotations

import json
import re
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable

import numpy as np

PAD, UNK = "<pad>", "<unk>"
PAD_ID, UNK_ID = 0, 1

_WORD = re.compile(r"[a-z0-9']+")


def split_words(text: str) -> list[str]:
    """Lowercase and split on whitespace and punctuation."""
    return _WORD.findall(text.lower())


class Vocab:
    def __init__(self, words: Iterable[str] = ()):
        self.itos = [PAD, UNK]
        self.stoi = {PAD: PAD_ID, UNK: UNK_ID}
        for w in words:
            self.add(w)

    def add(self, word: str) -> int:
        if word not in self.stoi:
            self.stoi[word] = len(self.itos)
            self.itos.append(word)
        return self.stoi[word]

    def __len__(self):
        return len(self.itos)

    def __contains__(self, word):
        return word in self.stoi

    def id(self, word: str) -> int:
        return self.stoi.get(word, UNK_ID)

    def to_list(self) -> list[str]:
        return list(self.itos)

    @classmethod
    def from_list(cls, itos: list[str]) -> "Vocab":
        if itos[:2] != [PAD, UNK]:
            raise ValueError("vocab must start with the reserved PAD and UNK entries")
        return cls(itos[2:])


@dataclass(frozen=True)
class TokenSequence:
    ids: np.ndarray  # [max_len] int64, PAD-filled
    mask: np.ndarray  # [max_len] 1.0 on real tokens
    label: int
    words: tuple[str, ...]

    @property
    def length(self) -> int:
        return len(self.words)

    @property
    def text(self) -> str:
        return " ".join(self.words)


def from_words(words, vocab: Vocab, max_len: int, label: int = -1) -> TokenSequence:
    words = tuple(words)[:max_len]
    if not words:
        raise ValueError("cannot encode an empty word sequence")
    ids = np.full(max_len, PAD_ID, dtype=np.int64)
    ids[: len(words)] = [vocab.id(w) for w in words]
    mask = np.zeros(max_len)
    mask[: len(words)] = 1.0
    return TokenSequence(ids, mask, int(label), words)


def tokenize(text: str, vocab: Vocab, max_len: int, label: int = -1) -> TokenSequence:
    """Lowercased word split, UNK fallback, truncated and padded to ``max_len``."""
    words = split_words(text)
    if not words:
        raise ValueError(f"no tokens in text {text!r}")
    return from_words(words, vocab, max_len, label)


def batch(seqs: list[TokenSequence]) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    ids = np.stack([s.ids for s in seqs])
    mask = np.stack([s.mask for s in seqs])
    labels = np.array([s.label for s in seqs], dtype=np.int64)
    return ids, mask, labels


# ---------------------------------------------------------------- JSONL


def read_jsonl(path) -> list[dict]:
    rows = []
    with open(path, encoding="utf-8") as fh:
        for n, line in enumerate(fh, 1):
            if line.strip():
                try:
                    rows.append(json.loads(line))
                except json.JSONDecodeError as err:
                    raise ValueError(f"{path}:{n}: {err}") from err
    return rows


def write_jsonl(path, rows: Iterable[dict]):
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        for row in rows:
            fh.write(json.dumps(row, sort_keys=True) + "\n")


def load_dataset(path) -> list[tuple[str, int]]:
    """Read ``{"text": str, "label": int}`` lines."""
    out = []
    for row in read_jsonl(path):
        if not isinstance(row.get("text"), str) or not isinstance(row.get("label"), int):
            raise ValueError(f"{path}: each line needs a string 'text' and integer 'label'")
        out.append((row["text"], row["label"]))
    return out


def encode_dataset(rows, vocab: Vocab, max_len: int) -> list[TokenSequence]:
    return [tokenize(text, vocab, max_len, label) for text, label in rows]
