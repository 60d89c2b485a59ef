"""Word-level tokenizer with reserved special ids."""

from __future__ import annotations

import re
from collections import Counter
from pathlib import Path
from typing import Iterable

import numpy as np

PAD, CLS, UNK, MASK = 0, 1, 2, 3
SPECIALS = ("[PAD]", "[CLS]", "[UNK]", "[MASK]")
MAX_TOKENS = 56

_TOKEN_RE = re.compile(r"[a-z0-9]+|[^\sa-z0-9]")


def split(text: str) -> list[str]:
    return _TOKEN_RE.findall(text.lower())


def normalize(text: str) -> str:
    return " ".join(split(text))


class Vocab:
    def __init__(self, tokens: Iterable[str]):
        self.tokens = list(tokens)
        if tuple(self.tokens[:4]) != SPECIALS:
            raise ValueError("vocabulary must start with [PAD] [CLS] [UNK] [MASK]")
        self.index = {t: i for i, t in enumerate(self.tokens)}
        if len(self.index) != len(self.tokens):
            raise ValueError("duplicate vocabulary entries")

    def __len__(self) -> int:
        return len(self.tokens)

    @classmethod
    def build(cls, texts: Iterable[str], max_size: int = 8192) -> "Vocab":
        """Most frequent words first (ties alphabetical), capped at ``max_size`` entries."""
        counts = Counter()
        for t in texts:
            counts.update(split(t))
        ranked = sorted(counts, key=lambda w: (-counts[w], w))
        return cls(list(SPECIALS) + ranked[: max(0, max_size - len(SPECIALS))])

    def save(self, path) -> None:
        Path(path).write_text("\n".join(self.tokens) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path) -> "Vocab":
        return cls(Path(path).read_text(encoding="utf-8").splitlines())

    def tokenize(self, text: str, max_len: int = MAX_TOKENS) -> np.ndarray:
        """[CLS] + word ids, truncated to ``max_len`` and right-padded with [PAD]."""
        ids = [CLS] + [self.index.get(w, UNK) for w in split(text)]
        ids = ids[:max_len]
        out = np.full(max_len, PAD, dtype=np.int64)
        out[: len(ids)] = ids
        return out

    def detokenize(self, ids) -> str:
        return " ".join(self.tokens[int(i)] for i in ids if int(i) not in (PAD, CLS))

    def tokenize_batch(self, texts: Iterable[str], max_len: int = MAX_TOKENS) -> np.ndarray:
        return np.stack([self.tokenize(t, max_len) for t in texts])
