import numpy as np
import pytest

import aptm.numcore as nc
from aptm.attributes import Vocab, default_space, render_prompts
from aptm.encoders import APTM, ImageEncoderConfig, ModelConfig, TextEncoderConfig
from aptm.objectives import Batch

CAPTIONS = [
    "a man wearing a black jacket and blue jeans",
    "the woman has long hair and a handbag",
    "a girl in a red shirt with a backpack",
    "an old man with a hat and gray pants",
]


def tiny_config(vocab_size: int, d: int = 8) -> ModelConfig:
    return ModelConfig(
        image=ImageEncoderConfig(image_height=16, image_width=8, patch_size=4, embed_dim=d,
                                 num_layers=1, num_heads=2),
        text=TextEncoderConfig(vocab_size=vocab_size, embed_dim=d, num_layers=1, cross_layers=1,
                               num_heads=2),
        proj_dim=d,
        mlp_ratio=2,
    )


@pytest.fixture
def tiny_vocab():
    prompts = [p.text for p in render_prompts()]
    return Vocab.build(CAPTIONS + prompts)


@pytest.fixture
def prompt_ids(tiny_vocab):
    return np.stack([np.asarray(p.token_ids) for p in render_prompts(vocab=tiny_vocab)])


def make_batch(vocab, n: int, cfg: ModelConfig, seed: int = 0) -> Batch:
    from aptm.attributes import annotate

    rng = np.random.default_rng(seed)
    caps = [CAPTIONS[i % len(CAPTIONS)] for i in range(n)]
    pixels = rng.random((n, 3, cfg.image.image_height, cfg.image.image_width))
    ids = vocab.tokenize_batch(caps)
    attrs = np.stack([annotate(c) for c in caps])
    return Batch(pixels, ids, attrs)


@pytest.fixture
def tiny_model_f64(tiny_vocab):
    with nc.precision(np.float64):
        model = APTM(tiny_config(len(tiny_vocab)), seed=3)
    return model


# -- acceptance reporting ---------------------------------------------------

ACCEPTANCE_LINES: list[str] = []


@pytest.fixture
def criterion():
    """``criterion(n, title, ok, detail)`` prints one PASS/FAIL line and asserts ``ok``."""

    def report(number: int, title: str, ok: bool, detail: str = "") -> None:
        line = f"criterion {number}: {'PASS' if ok else 'FAIL'} - {title}" + (f" [{detail}]" if detail else "")
        print(line)
        ACCEPTANCE_LINES.append(line)
        assert ok, line

    return report


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
