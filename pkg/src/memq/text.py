"""Normalization and tokenization for mixed Chinese/Latin text."""

from __future__ import annotations

import re
import unicodedata
from dataclasses import dataclass

# Punctuation NFKC leaves alone.
_PUNCT_FOLD = str.maketrans(
    {
        "。": ".",
        "、": ",",
        "「": '"',
        "」": '"',
        "『": '"',
        "』": '"',
        "【": "[",
        "】": "]",
        "《": "<",
        "》": ">",
        "〈": "<",
        "〉": ">",
        "〔": "(",
        "〕": ")",
        "“": '"',
        "”": '"',
        "‘": "'",
        "’": "'",
        "…": "...",
        "\u2014": "-",
        "～": "~",
        "・": "·",
    }
)

_WS = re.compile(r"\s+")


def is_cjk(ch: str) -> bool:
    cp = ord(ch)
    return (
        0x4E00 <= cp <= 0x9FFF
        or 0x3400 <= cp <= 0x4DBF
        or 0x20000 <= cp <= 0x2A6DF
        or 0xF900 <= cp <= 0xFAFF
        or 0x3040 <= cp <= 0x30FF
        or 0xAC00 <= cp <= 0xD7AF
    )


def normalize(text: str) -> str:
    """NFKC, punctuation width folding, lowercase, whitespace collapse."""
    text = unicodedata.normalize("NFKC", text).translate(_PUNCT_FOLD).lower()
    return _WS.sub(" ", text).strip()


@dataclass(frozen=True)
class TokenList:
    tokens: tuple[str, ...]
    source_len: int

    def __len__(self) -> int:
        return len(self.tokens)

    def __iter__(self):
        return iter(self.tokens)


def _emit_cjk(run: list[str], out: list[str]) -> None:
    out.extend(run)
    out.extend(a + b for a, b in zip(run, run[1:]))


def tokenize(text: str) -> TokenList:
    """Split normalized text into word tokens and CJK unigrams + bigrams.

    A maximal run of letters/digits becomes one token. A maximal CJK run of
    length n yields its n characters followed by its n-1 adjacent pairs.
    Everything else separates tokens and is dropped.
    """
    out: list[str] = []
    word: list[str] = []
    run: list[str] = []
    for ch in text:
        if is_cjk(ch):
            if word:
                out.append("".join(word))
                word = []
            run.append(ch)
        elif ch.isalnum():
            if run:
                _emit_cjk(run, out)
                run = []
            word.append(ch)
        else:
            if word:
                out.append("".join(word))
                word = []
            if run:
                _emit_cjk(run, out)
                run = []
    if word:
        out.append("".join(word))
    if run:
        _emit_cjk(run, out)
    return TokenList(tuple(out), len(text))


def analyze(text: str) -> TokenList:
    return tokenize(normalize(text))
