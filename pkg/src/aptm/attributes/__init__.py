"""Attribute space, caption annotation, attribute prompts and tokenization."""

from .lexicon import Conflict, Lexicon, annotate, default_lexicon
from .space import (
    UNKNOWN,
    Attribute,
    AttributePrompt,
    AttributeSpace,
    Label,
    default_space,
    opposite,
    render_prompts,
)
from .tokenizer import CLS, MASK, MAX_TOKENS, PAD, SPECIALS, UNK, Vocab, normalize, split
