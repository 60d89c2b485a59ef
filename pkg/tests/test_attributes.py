from pathlib import Path

import numpy as np
import pytest
import yaml
from hypothesis import given, settings, strategies as st

from aptm.attributes import (
    CLS,
    PAD,
    UNK,
    UNKNOWN,
    AttributePrompt,
    Lexicon,
    Vocab,
    annotate,
    default_lexicon,
    default_space,
    normalize,
    opposite,
    render_prompts,
)

FIXTURES = Path(__file__).parent / "fixtures"

UPPER = ["black", "white", "red", "purple", "yellow", "blue", "green", "gray"]
LOWER = ["black", "white", "purple", "yellow", "blue", "green", "pink", "gray", "brown"]

# The prompt table, attribute-major, label 0 then label 1.
EXPECTED_PROMPTS = [
    "the person is a woman", "the person is a man",
    "the person is younger than 18 years old", "the person is older than 18 years old",
    "the person with short hair", "the person with long hair",
    "the person with a hat", "the person without a hat",
    "the person with a backpack", "the person without a backpack",
    "the person with a handbag", "the person without a handbag",
    "the person with a bag", "the person without a bag",
    "the person wears long sleeved upper clothes", "the person wears short sleeved upper clothes",
    "the person wears long dress or long pants", "the person wears short dress or short pants",
    "the person wears dress or skirt", "the person wears pants or shorts",
] + [t for c in UPPER for t in (f"the person wears {c} upper clothes",
                                 f"the person does not wear {c} upper clothes")] \
  + [t for c in LOWER for t in (f"the person wears {c} lower clothes",
                                f"the person does not wear {c} lower clothes")]


class TestSpace:
    def test_size(self):
        space = default_space()
        assert len(space) == 27
        assert all(len(a.labels) == 2 for a in space.attributes)

    def test_groups(self):
        groups = [a.group for a in default_space().attributes]
        assert groups.count("upper_color") == 8
        assert groups.count("lower_color") == 9

    def test_render_matches_table(self):
        prompts = render_prompts()
        assert len(prompts) == 54
        assert [p.text for p in prompts] == EXPECTED_PROMPTS

    def test_five_template_families(self):
        families = {lab.template for a in default_space().attributes for lab in a.labels}
        assert families == {"is", "with", "without", "wears", "not_wear"}

    def test_examples(self):
        space = default_space()
        assert space.render(space.index("gender"), 1) == "the person is a man"
        assert space.render(space.index("hat"), 0) == "the person with a hat"
        assert space.render(space.index("hat"), 1) == "the person without a hat"

    def test_prompt_index(self):
        for i, p in enumerate(render_prompts()):
            assert p.index == i

    def test_vector_dict_round_trip(self):
        space = default_space()
        vec = space.vector_from_dict({"gender": 1, "hat": 0, "age": None})
        d = space.vector_to_dict(vec)
        assert d["gender"] == 1 and d["hat"] == 0 and d["age"] is None
        np.testing.assert_array_equal(space.vector_from_dict(d), vec)


class TestOpposite:
    def test_man_to_woman(self):
        man = render_prompts()[1]
        assert opposite(man).text == "the person is a woman"

    @given(st.integers(0, 53))
    def test_involution_and_attribute_preserved(self, k):
        p = render_prompts()[k]
        q = opposite(p)
        assert q.attribute == p.attribute and q.polarity != p.polarity
        assert opposite(q) == p

    def test_token_ids_follow(self):
        vocab = Vocab.build(EXPECTED_PROMPTS)
        p = render_prompts(vocab=vocab)[6]
        q = opposite(p, vocab=vocab)
        assert vocab.detokenize(q.token_ids) == "the person without a hat"


def _fixture_cases():
    return yaml.safe_load((FIXTURES / "annotation_corpus.yaml").read_text())


class TestAnnotate:
    def test_fixture_corpus(self):
        space = default_space()
        cases = _fixture_cases()
        assert len(cases) == 20
        for case in cases:
            conflicts = []
            got = annotate(case["caption"], conflicts=conflicts)
            expected = space.vector_from_dict(case["labels"])
            assert space.vector_to_dict(got) == space.vector_to_dict(expected), case["caption"]
            assert sorted(c.attribute for c in conflicts) == sorted(case.get("conflicts", []))

    def test_empty_caption_only_implicit(self):
        lex = default_lexicon()
        got = default_space().vector_to_dict(annotate(""))
        assert {k for k, v in got.items() if v is not None} == set(lex.implicit)

    def test_case_insensitive_whole_word(self):
        space = default_space()
        assert annotate("A MAN")[space.index("gender")] == 1
        # "manners" is not "man", "hatch" is not "hat"
        got = annotate("good manners near the hatch")
        assert got[space.index("gender")] == UNKNOWN
        assert got[space.index("hat")] == 1

    @settings(max_examples=60, deadline=None)
    @given(st.lists(st.sampled_from(
        ["a", "man", "woman", "hat", "black", "jacket", "blue", "jeans", "bag", "no", "without",
         "long", "hair", "short", "pants", "handbag", "the", "with", "backpack", "cap"]), max_size=14))
    def test_deterministic_idempotent_em_precedence(self, toks):
        caption = " ".join(toks)
        a, b = annotate(caption), annotate(caption)
        np.testing.assert_array_equal(a, b)
        lex = default_lexicon()
        hits = lex._keyword_hits(caption.split())
        space = default_space()
        for attr, by_value in hits.items():
            idx = space.index(attr)
            if len(by_value) == 1:
                assert a[idx] == next(iter(by_value))  # IE never overrides EM
            else:
                assert a[idx] == UNKNOWN

    def test_known_values_have_prompt_pair(self):
        prompts = render_prompts()
        for case in _fixture_cases():
            vec = annotate(case["caption"])
            for attr, v in enumerate(vec):
                if v == UNKNOWN:
                    continue
                matched = [p for p in prompts if p.attribute == attr and p.polarity == v]
                opp = [p for p in prompts if p.attribute == attr and p.polarity != v]
                assert len(matched) == 1 and len(opp) == 1

    def test_conflicting_lexicon_rejected(self):
        with pytest.raises(ValueError):
            Lexicon({"keywords": {"gender": {0: ["person"], 1: ["person"]}}})

    def test_custom_lexicon_file(self, tmp_path):
        path = tmp_path / "lex.yaml"
        path.write_text(yaml.safe_dump({"keywords": {"hat": {0: ["fedora"]}}, "implicit": {}}))
        lex = Lexicon.from_file(path)
        vec = annotate("a fedora", lex)
        assert vec[default_space().index("hat")] == 0
        assert (vec != UNKNOWN).sum() == 1


class TestTokenizer:
    vocab = Vocab.build(["a man .", "the person is a woman"])

    def test_reserved_ids(self):
        assert self.vocab.tokens[:4] == ["[PAD]", "[CLS]", "[UNK]", "[MASK]"]

    def test_basic(self):
        ids = self.vocab.tokenize("A man.")
        idx = self.vocab.index
        assert ids[:4].tolist() == [CLS, idx["a"], idx["man"], idx["."]]
        assert np.all(ids[4:] == PAD) and len(ids) == 56

    def test_truncation(self):
        ids = self.vocab.tokenize(" ".join(["man"] * 100))
        assert len(ids) == 56 and np.all(ids != PAD)

    def test_oov(self):
        assert self.vocab.tokenize("zebra")[1] == UNK

    @given(st.lists(st.sampled_from(["a", "man", ".", "the", "person", "is", "woman"]), max_size=40))
    def test_round_trip(self, words):
        text = " ".join(words)
        assert self.vocab.detokenize(self.vocab.tokenize(text)) == normalize(text)

    def test_frequency_cap_and_order(self):
        v = Vocab.build(["b b b a a c"], max_size=6)
        assert v.tokens == ["[PAD]", "[CLS]", "[UNK]", "[MASK]", "b", "a"]

    def test_save_load(self, tmp_path):
        self.vocab.save(tmp_path / "vocab.txt")
        again = Vocab.load(tmp_path / "vocab.txt")
        assert again.tokens == self.vocab.tokens

    def test_prompt_lengths_within_limit(self):
        vocab = Vocab.build(EXPECTED_PROMPTS)
        for p in render_prompts(vocab=vocab):
            assert len(p.token_ids) <= 56
