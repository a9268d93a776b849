"""Vocabulary, prompts, and the caption grammar bijection."""

import pytest

from zestdiff import text


def test_vocab_has_unique_tokens():
    assert len(set(text.VOCAB)) == len(text.VOCAB)
    assert text.PAD_ID == 0


def test_encode_rejects_unknown():
    with pytest.raises(ValueError, match="unknown token"):
        text.encode_words(["a", "mauve", "circle"])


def test_prompt_length_limits():
    with pytest.raises(ValueError, match="max"):
        text.PromptSpec(tokens=[2] * 17)
    with pytest.raises(ValueError):
        text.PromptSpec(tokens=[])
    p = text.PromptSpec(tokens=[2, 3])
    assert len(p.padded()) == text.MAX_TOKENS


def test_prompt_rejects_bad_ids():
    with pytest.raises(ValueError, match="vocabulary"):
        text.PromptSpec(tokens=[999])


def test_caption_roundtrip_all_sizes():
    objs_pool = [("red", "circle"), ("blue", "square"), ("yellow", "triangle")]
    for k in (1, 2, 3):
        objs = objs_pool[:k]
        words, sets = text.caption_for(objs, "gray")
        assert len(sets) == k
        for (color, shape), idx in zip(objs, sets):
            assert words[idx[0]] == color and words[idx[1]] == shape
        parsed, bg = text.parse_caption(words)
        assert parsed == objs and bg == "gray"
        assert len(text.encode_words(words)) <= text.MAX_TOKENS


def test_parse_rejects_malformed():
    with pytest.raises(ValueError):
        text.parse_caption(["a", "red", "circle"])
    with pytest.raises(ValueError):
        text.parse_caption(["a", "red", "circle", "on", "red", "background"])


def test_null_prompt_shape():
    ids = text.null_prompt_ids()
    assert len(ids) == text.MAX_TOKENS
    assert set(ids) == {text.NULL_ID}
