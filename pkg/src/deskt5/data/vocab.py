"""Vocabularies: the default byte-level one and a word-level file loader.

Id layout shared by both kinds::

    0 pad | 1 eos | 2 start | ...regular tokens... | sentinels (top of range)

Sentinel ``i`` is ``vocab_size - 1 - i``.
"""

from __future__ import annotations

import hashlib
from pathlib import Path

PAD_ID = 0
EOS_ID = 1
START_ID = 2
BYTE_OFFSET = 3


class VocabParseError(ValueError):
    def __init__(self, path, lineno: int, msg: str):
        super().__init__(f"{path}:{lineno}: {msg}")
        self.lineno = lineno


class Vocab:
    pad_id = PAD_ID
    eos_id = EOS_ID
    start_id = START_ID

    size: int
    num_sentinels: int

    @property
    def sentinel_base(self) -> int:
        return self.size - 1

    def sentinel(self, i: int) -> int:
        if not 0 <= i < self.num_sentinels:
            raise ValueError(f"sentinel {i} outside the reserved range of {self.num_sentinels}")
        return self.sentinel_base - i

    def is_sentinel(self, tok: int) -> bool:
        return tok > self.sentinel_base - self.num_sentinels

    def tokenize(self, text: str) -> list[int]:
        raise NotImplementedError

    def detokenize(self, ids) -> str:
        raise NotImplementedError

    def fingerprint(self) -> str:
        raise NotImplementedError


class ByteVocab(Vocab):
    """UTF-8 bytes shifted by three, with every id above 258 a sentinel."""

    def __init__(self, size: int = 384):
        if size <= BYTE_OFFSET + 256:
            raise ValueError(f"byte vocabulary needs more than {BYTE_OFFSET + 256} ids")
        self.size = size
        self.num_sentinels = size - (BYTE_OFFSET + 256)

    def tokenize(self, text: str) -> list[int]:
        return [b + BYTE_OFFSET for b in text.encode("utf-8")]

    def detokenize(self, ids) -> str:
        raw = bytes(t - BYTE_OFFSET for t in ids if BYTE_OFFSET <= t < BYTE_OFFSET + 256)
        return raw.decode("utf-8", errors="replace")

    def fingerprint(self) -> str:
        return f"bytes:{self.size}"


SPECIALS = ("<pad>", "</s>", "<s>")


class WordVocab(Vocab):
    """Whitespace-split word vocabulary read from a file (line number = id).

    The first three lines must be ``<pad>``, ``</s>`` and ``<s>``. Lines of the
    form ``<extra_id_N>`` are sentinels and must fill the top of the file in
    descending order (``<extra_id_0>`` last). An optional ``<unk>`` line
    absorbs unknown words; without it unknown words raise ``KeyError``.
    """

    def __init__(self, tokens: list[str], source: str = "<memory>"):
        self.tokens = list(tokens)
        self.size = len(tokens)
        self.index = {t: i for i, t in enumerate(tokens)}
        self.unk_id = self.index.get("<unk>")
        self.num_sentinels = sum(1 for t in tokens if t.startswith("<extra_id_"))
        self.source = source

    @classmethod
    def from_file(cls, path) -> WordVocab:
        path = Path(path)
        tokens: list[str] = []
        seen: dict[str, int] = {}
        with open(path, encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, start=1):
                tok = line.rstrip("\n").rstrip("\r")
                if not tok:
                    raise VocabParseError(path, lineno, "empty token")
                if any(c.isspace() for c in tok):
                    raise VocabParseError(path, lineno, f"token {tok!r} contains whitespace")
                if tok in seen:
                    raise VocabParseError(path, lineno, f"duplicate token {tok!r} (first on line {seen[tok]})")
                if lineno <= len(SPECIALS) and tok != SPECIALS[lineno - 1]:
                    raise VocabParseError(path, lineno, f"expected {SPECIALS[lineno - 1]!r}, found {tok!r}")
                seen[tok] = lineno
                tokens.append(tok)
        if len(tokens) < len(SPECIALS):
            raise VocabParseError(path, len(tokens) + 1, "missing special tokens <pad>, </s>, <s>")
        n = len(tokens)
        for i, tok in enumerate(tokens):
            if tok.startswith("<extra_id_"):
                expected = f"<extra_id_{n - 1 - i}>"
                if tok != expected:
                    raise VocabParseError(path, i + 1, f"sentinel {tok!r} out of place; expected {expected!r}")
        return cls(tokens, source=str(path))

    def tokenize(self, text: str) -> list[int]:
        out = []
        for word in text.split():
            idx = self.index.get(word, self.unk_id)
            if idx is None:
                raise KeyError(f"word {word!r} not in vocabulary and no <unk> token")
            out.append(idx)
        return out

    def detokenize(self, ids) -> str:
        words = []
        for t in ids:
            if t in (PAD_ID, EOS_ID, START_ID) or self.is_sentinel(t):
                continue
            words.append(self.tokens[t])
        return " ".join(words)

    def fingerprint(self) -> str:
        digest = hashlib.sha256("\n".join(self.tokens).encode("utf-8")).hexdigest()[:16]
        return f"words:{self.size}:{digest}"


def load_vocab(kind: str = "bytes", size: int = 384, path: str | None = None) -> Vocab:
    if kind == "bytes":
        return ByteVocab(size)
    if kind == "words":
        if not path:
            raise ValueError("word vocabulary needs a file path")
        return WordVocab.from_file(path)
    raise ValueError(f"unknown vocabulary kind {kind!r}; expected 'bytes' or 'words'")
