"""Toy text side: fixed vocabulary, caption grammar, prompt encoding.

Captions follow one grammar: "a {color} {shape}" per object, objects joined
by "and", then "on {bg-color} background". The vocabulary covers exactly
that grammar plus pad/null control tokens; prompts are always padded to
MAX_TOKENS so every graph sees a fixed-length token sequence.
"""

from __future__ import annotations

from dataclasses import dataclass, field

MAX_TOKENS = 16

PAD, NULL = "<pad>", "<null>"
GLUE = ["a", "and", "on", "background"]
OBJECT_COLORS = ["red", "green", "blue", "yellow", "cyan", "magenta"]
BACKGROUND_COLORS = ["white", "black", "gray"]
SHAPES = ["circle", "square", "triangle"]

VOCAB = [PAD, NULL] + GLUE + OBJECT_COLORS + BACKGROUND_COLORS + SHAPES
TOKEN_ID = {w: i for i, w in enumerate(VOCAB)}
PAD_ID = TOKEN_ID[PAD]
NULL_ID = TOKEN_ID[NULL]


def encode_words(words) -> list[int]:
    """Map words to token ids; unknown words are rejected."""
    ids = []
    for w in words:
        tid = TOKEN_ID.get(w)
        if tid is None:
            raise ValueError(f"unknown token {w!r}; vocabulary: {VOCAB}")
        ids.append(tid)
    return ids


def decode_ids(ids) -> list[str]:
    return [VOCAB[i] for i in ids]


@dataclass
class PromptSpec:
    """A tokenized prompt, padded to MAX_TOKENS."""

    tokens: list[int] = field(default_factory=list)

    def __post_init__(self):
        if len(self.tokens) == 0:
            raise ValueError("prompt must contain at least one token")
        if len(self.tokens) > MAX_TOKENS:
            raise ValueError(
                f"prompt has {len(self.tokens)} tokens, max is {MAX_TOKENS}")
        for t in self.tokens:
            if not (0 <= t < len(VOCAB)):
                raise ValueError(f"token id {t} outside vocabulary of {len(VOCAB)}")

    @classmethod
    def from_text(cls, text: str) -> "PromptSpec":
        return cls(encode_words(text.split()))

    def padded(self) -> list[int]:
        return self.tokens + [PAD_ID] * (MAX_TOKENS - len(self.tokens))

    def words(self) -> list[str]:
        return decode_ids(self.tokens)


def null_prompt_ids() -> list[int]:
    """Token ids of the learned null conditioning (for classifier-free guidance)."""
    return [NULL_ID] * MAX_TOKENS


def caption_for(objects, bg_color: str) -> tuple[list[str], list[tuple[int, ...]]]:
    """Caption words for (color, shape) objects plus per-object token indices.

    Returns (words, token_index_sets); the index set of object i points at
    its color and shape words inside the caption.
    """
    words = []
    index_sets = []
    for k, (color, shape) in enumerate(objects):
        if k > 0:
            words.append("and")
        words.append("a")
        index_sets.append((len(words), len(words) + 1))
        words.extend([color, shape])
    words.extend(["on", bg_color, "background"])
    return words, index_sets


def parse_caption(words) -> tuple[list[tuple[str, str]], str]:
    """Invert caption_for: returns ([(color, shape), ...], bg_color)."""
    words = list(words)
    while words and words[-1] == PAD:
        words.pop()
    if len(words) < 6 or words[-1] != "background" or words[-3] != "on":
        raise ValueError(f"not a well-formed caption: {words}")
    bg = words[-2]
    if bg not in BACKGROUND_COLORS:
        raise ValueError(f"unknown background color {bg!r}")
    body = words[:-3]
    objects = []
    i = 0
    while i < len(body):
        if objects:
            if body[i] != "and":
                raise ValueError(f"expected 'and' at position {i} in {body}")
            i += 1
        if body[i] != "a":
            raise ValueError(f"expected 'a' at position {i} in {body}")
        color, shape = body[i + 1], body[i + 2]
        if color not in OBJECT_COLORS or shape not in SHAPES:
            raise ValueError(f"bad object descriptor {color!r} {shape!r}")
        objects.append((color, shape))
        i += 3
    return objects, bg
