"""Reduced-word arithmetic for free groups.

Letters are nonzero signed integers: +j is the j-th generator, -j its
inverse. A word is a tuple of letters with no adjacent inverse pair.
Everything here is exact integer arithmetic.
"""

from __future__ import annotations

from typing import Iterable, Sequence, Tuple

Word = Tuple[int, ...]

EMPTY: Word = ()

_LETTER_NAMES = "abcdefghijklmnopqrstuvwxyz"


def reduce_word(letters: Iterable[int]) -> Word:
    """Freely reduce a letter sequence with a single stack pass."""
    stack: list[int] = []
    for s in letters:
        if s == 0:
            raise ValueError("0 is not a letter")
        if stack and stack[-1] == -s:
            stack.pop()
        else:
            stack.append(s)
    return tuple(stack)


def is_reduced(word: Sequence[int]) -> bool:
    return all(word[i] != -word[i + 1] for i in range(len(word) - 1)) and 0 not in word


def multiply(u: Sequence[int], v: Sequence[int]) -> Word:
    """Reduced product u*v. Only the u-suffix touching v can cancel."""
    stack = list(u)
    for s in v:
        if stack and stack[-1] == -s:
            stack.pop()
        else:
            stack.append(s)
    return tuple(stack)


def inverse(u: Sequence[int]) -> Word:
    return tuple(-s for s in reversed(u))


def common_prefix_len(u: Sequence[int], v: Sequence[int]) -> int:
    n = 0
    for a, b in zip(u, v):
        if a != b:
            break
        n += 1
    return n


def cyclic_reduce(u: Sequence[int]) -> Word:
    """Strip matching (first, last) inverse pairs; length of the result is
    the translation length of u on the Cayley tree."""
    w = list(reduce_word(u))
    i, j = 0, len(w) - 1
    while i < j and w[i] == -w[j]:
        i += 1
        j -= 1
    return tuple(w[i : j + 1])


def parse_word(text: str, rank: int) -> Word:
    """Parse words like "ab", "aB", "a b^-1", "e". Uppercase = inverse."""
    text = text.strip()
    if text in ("", "e", "1"):
        return EMPTY
    letters: list[int] = []
    i = 0
    while i < len(text):
        ch = text[i]
        if ch in " \t*.":
            i += 1
            continue
        low = ch.lower()
        if low not in _LETTER_NAMES[:rank]:
            raise ValueError(f"unknown generator {ch!r} for rank {rank}")
        val = _LETTER_NAMES.index(low) + 1
        if ch.isupper():
            val = -val
        i += 1
        if text[i : i + 3] == "^-1":
            val = -val
            i += 3
        letters.append(val)
    return reduce_word(letters)


def format_word(word: Sequence[int]) -> str:
    if not word:
        return "e"
    out = []
    for s in word:
        name = _LETTER_NAMES[abs(s) - 1]
        out.append(name.upper() if s < 0 else name)
    return "".join(out)
