"""Byte-level tokenizer and synthetic instruction corpora."""

from __future__ import annotations

import random
import string
from collections.abc import Sequence
from dataclasses import dataclass

from .config import BOS, EOS, PAD, RESP
from .errors import ArgumentError

SPECIALS = {PAD: "<pad>", BOS: "<bos>", EOS: "<eos>", RESP: "<resp>"}


def encode(text: str | bytes) -> list[int]:
    raw = text if isinstance(text, (bytes, bytearray)) else text.encode("utf-8", "surrogateescape")
    return list(raw)


def decode_bytes(ids: Sequence[int]) -> bytes:
    return bytes(i for i in ids if i < 256)


def decode(ids: Sequence[int]) -> str:
    """Inverse of :func:`encode`; special ids are dropped."""
    return decode_bytes(ids).decode("utf-8", "surrogateescape")


def wrap(prompt: str, response: str | None = None) -> tuple[list[int], list[int]]:
    """Wire format: BOS prompt RESP | response EOS."""
    prompt_ids = [BOS, *encode(prompt), RESP]
    response_ids = [] if response is None else [*encode(response), EOS]
    return prompt_ids, response_ids


@dataclass(frozen=True)
class Corpus:
    examples: tuple[tuple[str, str], ...]
    recipe: str
    seed: int

    def __len__(self) -> int:
        return len(self.examples)

    @property
    def provenance(self) -> str:
        return f"{self.recipe}@{self.seed}"

    def records(self) -> list[dict]:
        return [{"prompt": p, "response": r} for p, r in self.examples]


LETTERS = string.ascii_lowercase


def _copy(rng: random.Random) -> tuple[str, str]:
    payload = "".join(rng.choice(LETTERS) for _ in range(rng.randint(3, 8)))
    return f"repeat: {payload}", payload


PATTERN_LENGTH = 12


def _pattern(rng: random.Random) -> tuple[str, str]:
    # fixed continuation length, so the prompt alone determines the whole response
    unit = "".join(rng.choice(LETTERS) for _ in range(rng.randint(2, 4)))
    seq = unit * (2 + PATTERN_LENGTH // len(unit) + 1)
    shown = 2 * len(unit)
    return f"continue: {seq[:shown]}", seq[shown : shown + PATTERN_LENGTH]


def _arithmetic(rng: random.Random) -> tuple[str, str]:
    a, b = rng.randint(10, 99), rng.randint(10, 99)
    return f"add {a} {b}", f"The sum of {a} and {b} is {a + b}."


RECIPES = {"copy": _copy, "pattern": _pattern, "arithmetic": _arithmetic}


def synth_corpus(recipe: str, seed: int, size: int) -> Corpus:
    """Deterministic corpus; ``recipe`` may join several names with '+' (e.g. "pattern+copy")."""
    names = recipe.split("+")
    for name in names:
        if name not in RECIPES:
            raise ArgumentError(f"unknown recipe {name!r}; choose from {sorted(RECIPES)}")
    rng = random.Random(f"{recipe}:{seed}")
    examples = tuple(RECIPES[names[i % len(names)]](rng) for i in range(size))
    return Corpus(examples, recipe, seed)


def held_out(recipe: str, seed: int, size: int, exclude: Corpus) -> Corpus:
    """Corpus from a disjoint seed with every training prompt removed."""
    seen = {p for p, _ in exclude.examples}
    out: list[tuple[str, str]] = []
    salt = 0
    while len(out) < size:
        extra = synth_corpus(recipe, seed * 1000 + 7919 + salt, size)
        out.extend(ex for ex in extra.examples if ex[0] not in seen and ex not in out)
        salt += 1
    return Corpus(tuple(out[:size]), recipe, seed)
