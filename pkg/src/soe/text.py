"""Deterministic stand-in for a text encoder: one fixed vector per word."""

from __future__ import annotations

import re
import zlib

import numpy as np

from .errors import UsageError
from .latentdiff import TextCondition

_WORD = re.compile(r"[a-z0-9]+")


def tokenize(prompt: str) -> list[str]:
    return _WORD.findall(prompt.lower())


def token_vector(word: str, dim: int) -> np.ndarray:
    rng = np.random.default_rng(zlib.crc32(word.encode("utf-8")))
    return rng.standard_normal(dim) / np.sqrt(dim)


def label_span(tokens: list[str], label: str) -> tuple[int, ...]:
    """Indices of the (last) occurrence of the label's words inside ``tokens``."""
    words = tokenize(label)
    if not words:
        raise UsageError("empty label")
    for start in range(len(tokens) - len(words), -1, -1):
        if tokens[start:start + len(words)] == words:
            return tuple(range(start, start + len(words)))
    raise UsageError(f"label {label!r} does not occur in prompt {' '.join(tokens)!r}")


def make_condition(prompt: str, label: str, dim: int) -> TextCondition:
    tokens = tokenize(prompt)
    if not tokens:
        raise UsageError("empty prompt")
    emb = np.stack([token_vector(w, dim) for w in tokens])
    return TextCondition(emb, label_span(tokens, label))
