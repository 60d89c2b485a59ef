"""The binary attribute space and its attribute prompts."""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache
from importlib import resources
from pathlib import Path

import numpy as np
import yaml

UNKNOWN = -1
PLACEHOLDER = "{ Label Text }"


@dataclass(frozen=True)
class Label:
    name: str
    template: str  # template family id
    text: str


@dataclass(frozen=True)
class Attribute:
    name: str
    group: str
    labels: tuple[Label, Label]


@dataclass(frozen=True)
class AttributeSpace:
    attributes: tuple[Attribute, ...]
    templates: dict = field(hash=False, compare=False)

    def __post_init__(self):
        names = [a.name for a in self.attributes]
        if len(set(names)) != len(names):
            raise ValueError("duplicate attribute names")
        for a in self.attributes:
            if len(a.labels) != 2:
                raise ValueError(f"attribute {a.name} must have exactly two labels")
            for lab in a.labels:
                if lab.template not in self.templates:
                    raise ValueError(f"unknown template family {lab.template!r} in {a.name}")

    def __len__(self) -> int:
        return len(self.attributes)

    @property
    def names(self) -> list[str]:
        return [a.name for a in self.attributes]

    def index(self, name: str) -> int:
        return self.names.index(name)

    def render(self, attribute: int, polarity: int) -> str:
        label = self.attributes[attribute].labels[polarity]
        return self.templates[label.template].replace(PLACEHOLDER, label.text)

    # AttributeVector helpers: plain int8 arrays, UNKNOWN = -1.
    def empty_vector(self) -> np.ndarray:
        return np.full(len(self), UNKNOWN, dtype=np.int8)

    def vector_from_dict(self, values: dict) -> np.ndarray:
        vec = self.empty_vector()
        for name, v in values.items():
            if v is None:
                continue
            if v not in (0, 1):
                raise ValueError(f"attribute {name} must be 0, 1 or null, got {v!r}")
            vec[self.index(name)] = v
        return vec

    def vector_to_dict(self, vec) -> dict:
        return {n: (None if int(v) == UNKNOWN else int(v)) for n, v in zip(self.names, vec)}

    @classmethod
    def from_file(cls, path) -> "AttributeSpace":
        return cls.from_mapping(yaml.safe_load(Path(path).read_text()))

    @classmethod
    def from_mapping(cls, raw: dict) -> "AttributeSpace":
        attrs = tuple(
            Attribute(a["name"], a.get("group", a["name"]),
                      tuple(Label(str(n), str(t), str(x)) for n, t, x in a["labels"]))
            for a in raw["attributes"]
        )
        return cls(attrs, dict(raw["templates"]))


@lru_cache(maxsize=None)
def default_space() -> AttributeSpace:
    text = resources.files("aptm.data").joinpath("attributes.yaml").read_text()
    return AttributeSpace.from_mapping(yaml.safe_load(text))


@dataclass(frozen=True)
class AttributePrompt:
    attribute: int
    polarity: int
    text: str
    token_ids: tuple[int, ...] | None = None

    @property
    def index(self) -> int:
        """Position in the 2*|A| prompt list."""
        return 2 * self.attribute + self.polarity


def render_prompts(space: AttributeSpace | None = None, vocab=None) -> list[AttributePrompt]:
    """One prompt per (attribute, label), ordered attribute-major."""
    space = space or default_space()
    out = []
    for i in range(len(space)):
        for pol in (0, 1):
            text = space.render(i, pol)
            ids = tuple(int(t) for t in vocab.tokenize(text)) if vocab is not None else None
            out.append(AttributePrompt(i, pol, text, ids))
    return out


def opposite(prompt: AttributePrompt, space: AttributeSpace | None = None, vocab=None) -> AttributePrompt:
    """Same attribute, other label."""
    space = space or default_space()
    pol = 1 - prompt.polarity
    text = space.render(prompt.attribute, pol)
    ids = None
    if prompt.token_ids is not None:
        if vocab is None:
            raise ValueError("prompt carries token ids; pass the vocab to re-tokenize")
        ids = tuple(int(t) for t in vocab.tokenize(text))
    return AttributePrompt(prompt.attribute, pol, text, ids)
