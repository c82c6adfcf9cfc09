"""Token alphabet shared by every task.

Tokens are small ints.  Digits map to themselves (0..15) so arithmetic modules
work on token ids directly; the four non-digit symbols sit above the digits.
"""
from __future__ import annotations

from typing import Iterable, Sequence

MAX_BASE = 16

EMPTY = 16
SEP = 17
PLUS = 18
STAR = 19

_CHARS = "0123456789abcdef.$+*"
_FROM_CHAR = {c: i for i, c in enumerate(_CHARS)}


def is_digit(tok: int, base: int = MAX_BASE) -> bool:
    return 0 <= tok < base


def to_char(tok: int) -> str:
    return _CHARS[tok]


def from_char(c: str) -> int:
    try:
        return _FROM_CHAR[c.lower()]
    except KeyError:
        raise ValueError(f"unknown token character {c!r}") from None


def tape_to_str(tape: Iterable[int]) -> str:
    return "".join(_CHARS[t] for t in tape)


def parse_tape(text: str) -> tuple[int, ...]:
    return tuple(from_char(c) for c in text)


class Vocab:
    """Ordered task vocabulary; the order fixes the one-hot channel layout."""

    def __init__(self, base: int, symbols: Sequence[int]):
        if not 2 <= base <= MAX_BASE:
            raise ValueError(f"base must be in [2, {MAX_BASE}], got {base}")
        self.base = base
        self.tokens: tuple[int, ...] = tuple(range(base)) + tuple(symbols)
        self.index = {t: i for i, t in enumerate(self.tokens)}
        # dense lookup table: token id -> vocab row, -1 when absent
        self.lookup = [-1] * len(_CHARS)
        for t, i in self.index.items():
            self.lookup[t] = i

    def __len__(self) -> int:
        return len(self.tokens)

    def __contains__(self, tok: int) -> bool:
        return tok in self.index

    def __eq__(self, other: object) -> bool:
        return isinstance(other, Vocab) and self.tokens == other.tokens

    def __hash__(self) -> int:
        return hash(self.tokens)

    def __repr__(self) -> str:
        return f"Vocab({tape_to_str(self.tokens)!r})"
