"""Caption annotation: keyword matching followed by absence-based defaults."""

from __future__ import annotations

import logging
import re
from dataclasses import dataclass
from functools import lru_cache
from importlib import resources
from pathlib import Path

import numpy as np
import yaml

from .space import UNKNOWN, AttributeSpace, default_space

log = logging.getLogger(__name__)

_WORD_RE = re.compile(r"[a-z0-9]+")


def words(text: str) -> list[str]:
    return _WORD_RE.findall(text.lower())


@dataclass
class Conflict:
    caption: str
    attribute: str
    matched: dict  # label value -> matched phrases


class Lexicon:
    def __init__(self, raw: dict, space: AttributeSpace | None = None):
        self.space = space or default_space()
        self.phrases: dict[str, list[tuple[tuple[str, ...], int]]] = {}
        for attr, by_value in (raw.get("keywords") or {}).items():
            self.space.index(attr)
            seen: dict[tuple[str, ...], int] = {}
            for value, terms in by_value.items():
                value = int(value)
                for term in terms:
                    key = tuple(words(str(term)))
                    if seen.get(key, value) != value:
                        raise ValueError(f"keyword {term!r} maps to both labels of {attr}")
                    seen[key] = value
            self.phrases[attr] = sorted(seen.items(), key=lambda kv: (-len(kv[0]), kv[0]))

        gc = raw.get("garment_colors") or {}
        self.window = int(gc.get("window", 3))
        self.colors = {str(k): str(v) for k, v in (gc.get("colors") or {}).items()}
        self.garments: dict[str, dict[str, str]] = {}
        for side in ("upper", "lower"):
            spec = gc.get(side) or {}
            for g in spec.get("garments", []):
                self.garments.setdefault(str(g), {}).update(
                    {str(c): str(a) for c, a in (spec.get("attributes") or {}).items()})
        for table in self.garments.values():
            for attr in table.values():
                self.space.index(attr)

        self.implicit: dict[str, tuple[int, frozenset]] = {}
        for attr, rule in (raw.get("implicit") or {}).items():
            self.space.index(attr)
            extra = frozenset(tuple(words(t)) for t in rule.get("triggers", []))
            self.implicit[attr] = (int(rule["value"]), extra)

    @classmethod
    def from_file(cls, path, space: AttributeSpace | None = None) -> "Lexicon":
        return cls(yaml.safe_load(Path(path).read_text()), space)

    def _keyword_hits(self, tokens: list[str]) -> dict[str, dict[int, list[str]]]:
        hits: dict[str, dict[int, list[str]]] = {}
        n = len(tokens)
        for attr, phrases in self.phrases.items():
            used = [False] * n
            for phrase, value in phrases:
                k = len(phrase)
                for i in range(n - k + 1):
                    if tuple(tokens[i:i + k]) == phrase and not any(used[i:i + k]):
                        used[i:i + k] = [True] * k
                        hits.setdefault(attr, {}).setdefault(value, []).append(" ".join(phrase))
        for i, tok in enumerate(tokens):
            color = self.colors.get(tok)
            if color is None:
                continue
            for j in range(i + 1, min(n, i + 1 + self.window)):
                table = self.garments.get(tokens[j])
                if table is None:
                    continue
                attr = table.get(color)
                if attr is not None:
                    hits.setdefault(attr, {}).setdefault(0, []).append(f"{tok} {tokens[j]}")
                break
        return hits

    def annotate(self, caption: str, conflicts: list | None = None) -> np.ndarray:
        tokens = words(caption)
        vec = self.space.empty_vector()
        hits = self._keyword_hits(tokens)
        for attr, by_value in hits.items():
            idx = self.space.index(attr)
            if len(by_value) > 1:
                c = Conflict(caption, attr, {v: sorted(set(p)) for v, p in by_value.items()})
                log.info("conflicting keywords for %s in %r: %s", attr, caption, c.matched)
                if conflicts is not None:
                    conflicts.append(c)
                continue
            vec[idx] = next(iter(by_value))
        present = {tuple(tokens[i:i + k]) for k in (1, 2, 3) for i in range(len(tokens) - k + 1)}
        for attr, (value, extra) in self.implicit.items():
            if attr in hits or present & extra:
                continue
            vec[self.space.index(attr)] = value
        return vec


@lru_cache(maxsize=None)
def default_lexicon() -> Lexicon:
    text = resources.files("aptm.data").joinpath("lexicon.yaml").read_text()
    return Lexicon(yaml.safe_load(text))


def annotate(caption: str, lexicon: Lexicon | None = None, conflicts: list | None = None) -> np.ndarray:
    """Attribute vector for a caption (int8, -1 = unknown)."""
    return (lexicon or default_lexicon()).annotate(caption, conflicts)


__all__ = ["Conflict", "Lexicon", "annotate", "default_lexicon", "UNKNOWN"]
