"""Codepoint-level text front end and the vocabulary swapped between scripts."""

from __future__ import annotations

import hashlib
import logging
import re
import unicodedata
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable

import numpy as np

log = logging.getLogger(__name__)

PAD = 0
EOS = 1
_SPECIALS = ("<pad>", "<eos>")
_HEADER = "#vocab v1 script="
_WS = re.compile(r"\s+")


def normalize(text: str) -> str:
    """NFC, collapse whitespace runs to one space, strip the ends."""
    return _WS.sub(" ", unicodedata.normalize("NFC", text)).strip()


def detect_script(texts: Iterable[str]) -> str:
    for t in texts:
        if any(0x0900 <= ord(ch) <= 0x097F for ch in t):
            return "devanagari"
    return "latin"


@dataclass(frozen=True)
class Vocabulary:
    symbols: tuple[str, ...]  # ordinary entries, codepoint ascending
    script: str = "unknown"

    def __post_init__(self):
        if len(set(self.symbols)) != len(self.symbols):
            raise ValueError("vocabulary entries must be unique")
        if any(len(s) != 1 for s in self.symbols):
            raise ValueError("vocabulary entries must be single codepoints")
        object.__setattr__(self, "_index", {s: i + len(_SPECIALS) for i, s in enumerate(self.symbols)})

    @property
    def entries(self) -> tuple[str, ...]:
        return _SPECIALS + self.symbols

    def __len__(self) -> int:
        return len(self.symbols) + len(_SPECIALS)

    def __contains__(self, ch: str) -> bool:
        return ch in self._index

    def index(self, ch: str) -> int:
        return self._index[ch]

    def covers(self, texts: Iterable[str]) -> bool:
        return not self.missing(texts)

    def missing(self, texts: Iterable[str]) -> set[str]:
        return {ch for t in texts for ch in t if ch not in self._index}

    def to_text(self) -> str:
        return _HEADER + self.script + "\n" + "".join(s + "\n" for s in self.symbols)

    @classmethod
    def from_text(cls, text: str) -> "Vocabulary":
        lines = text.split("\n")
        if not lines or not lines[0].startswith(_HEADER):
            raise ValueError("vocabulary file lacks the '#vocab v1 script=' header")
        script = lines[0][len(_HEADER) :]
        body = lines[1:]
        if body and body[-1] == "":
            body = body[:-1]
        return cls(tuple(body), script)

    def save(self, path) -> None:
        Path(path).write_text(self.to_text(), encoding="utf-8")

    @classmethod
    def load(cls, path) -> "Vocabulary":
        return cls.from_text(Path(path).read_text(encoding="utf-8"))

    @property
    def fingerprint(self) -> str:
        return hashlib.sha256(self.to_text().encode("utf-8")).hexdigest()[:16]


def build_vocabulary(texts: Iterable[str], script: str | None = None) -> Vocabulary:
    texts = list(texts)
    if not texts or not any(texts):
        raise ValueError("cannot build a vocabulary from an empty corpus")
    symbols = tuple(sorted({ch for t in texts for ch in t}, key=ord))
    return Vocabulary(symbols, script or detect_script(texts))


@dataclass(frozen=True)
class EncodedText:
    ids: np.ndarray  # int64, ends with EOS
    dropped: int = 0

    def __len__(self) -> int:
        return int(self.ids.shape[0])


def encode(text: str, vocab: Vocabulary) -> EncodedText:
    """Look codepoints up one by one; unknown ones are dropped and counted."""
    ids = []
    dropped = 0
    for ch in text:
        if ch in vocab:
            ids.append(vocab.index(ch))
        else:
            dropped += 1
    if dropped:
        log.warning("dropped %d out-of-vocabulary codepoint(s) from %r", dropped, text)
    if not ids:
        raise ValueError(f"nothing left to encode in {text!r}")
    ids.append(EOS)
    return EncodedText(np.asarray(ids, dtype=np.int64), dropped)


def decode(ids, vocab: Vocabulary) -> str:
    entries = vocab.entries
    return "".join(entries[i] for i in np.asarray(ids).tolist() if i not in (PAD, EOS))
