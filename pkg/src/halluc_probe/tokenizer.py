"""Tokenizers: a total byte-level one and a greedy longest-match vocabulary one."""

from __future__ import annotations

import json
import os
from pathlib import Path
from typing import Protocol, Sequence

SPACE_MARKER = "▁"


class TokenizerError(ValueError):
    pass


class Tokenizer(Protocol):
    vocab_size: int

    def encode(self, text: str) -> list[int]: ...

    def decode(self, ids: Sequence[int]) -> str: ...

    def token_string(self, token_id: int) -> str: ...


class ByteTokenizer:
    """UTF-8 bytes as token ids (vocabulary of 256)."""

    vocab_size = 256

    def encode(self, text: str) -> list[int]:
        return list(text.encode("utf-8"))

    def decode(self, ids: Sequence[int]) -> str:
        return bytes(int(i) for i in ids).decode("utf-8", errors="replace")

    def token_string(self, token_id: int) -> str:
        if 0x20 <= token_id < 0x7F:
            return chr(token_id)
        return f"<0x{token_id:02X}>"


class VocabTokenizer:
    """Greedy longest-match tokenizer over an explicit vocabulary.

    Byte fallback is enabled when the vocabulary carries all 256
    ``<0xNN>`` tokens (the SentencePiece convention). If any token contains
    U+2581 the vocabulary is treated as SentencePiece-style and spaces are
    mapped to that marker before matching.
    """

    def __init__(self, pairs: Sequence[tuple[str, int]]):
        self._to_id: dict[str, int] = {}
        self._to_str: dict[int, str] = {}
        for tok, idx in pairs:
            idx = int(idx)
            if idx < 0:
                raise TokenizerError(f"negative token id {idx} for {tok!r}")
            if tok in self._to_id:
                raise TokenizerError(f"duplicate token string {tok!r}")
            if idx in self._to_str:
                raise TokenizerError(f"duplicate token id {idx}")
            self._to_id[tok] = idx
            self._to_str[idx] = tok
        if not self._to_id:
            raise TokenizerError("empty vocabulary")
        self.vocab_size = max(self._to_str) + 1
        self._max_len = max(len(t) for t in self._to_id)
        self._space_marker = any(SPACE_MARKER in t for t in self._to_id)
        self._byte_ids = {}
        for b in range(256):
            idx = self._to_id.get(f"<0x{b:02X}>")
            if idx is not None:
                self._byte_ids[b] = idx
        self._byte_fallback = len(self._byte_ids) == 256
        self._id_to_byte = {v: k for k, v in self._byte_ids.items()}

    @classmethod
    def from_file(cls, path: str | os.PathLike) -> "VocabTokenizer":
        with open(path, encoding="utf-8") as fh:
            raw = json.load(fh)
        if not isinstance(raw, list):
            raise TokenizerError(f"{path}: expected a JSON array of [token, id] pairs")
        pairs = []
        for n, item in enumerate(raw):
            if not (isinstance(item, list) and len(item) == 2 and isinstance(item[0], str)):
                raise TokenizerError(f"{path}: entry {n} is not a [token, id] pair")
            pairs.append((item[0], item[1]))
        return cls(pairs)

    def encode(self, text: str) -> list[int]:
        if self._space_marker:
            text = text.replace(" ", SPACE_MARKER)
        ids: list[int] = []
        i = 0
        while i < len(text):
            for length in range(min(self._max_len, len(text) - i), 0, -1):
                idx = self._to_id.get(text[i : i + length])
                if idx is not None:
                    ids.append(idx)
                    i += length
                    break
            else:
                if not self._byte_fallback:
                    raise TokenizerError(f"unknown token at offset {i}: {text[i]!r}")
                ids.extend(self._byte_ids[b] for b in text[i].encode("utf-8"))
                i += 1
        return ids

    def decode(self, ids: Sequence[int]) -> str:
        parts: list[str] = []
        pending = bytearray()
        for idx in ids:
            idx = int(idx)
            if idx in self._id_to_byte:
                pending.append(self._id_to_byte[idx])
                continue
            if pending:
                parts.append(pending.decode("utf-8", errors="replace"))
                pending.clear()
            try:
                parts.append(self._to_str[idx])
            except KeyError:
                raise TokenizerError(f"token id {idx} not in vocabulary") from None
        if pending:
            parts.append(pending.decode("utf-8", errors="replace"))
        text = "".join(parts)
        if self._space_marker:
            text = text.replace(SPACE_MARKER, " ")
        return text

    def token_string(self, token_id: int) -> str:
        return self._to_str.get(int(token_id), f"<unk:{token_id}>")


def load_tokenizer(path: str | os.PathLike | None) -> Tokenizer:
    """Vocabulary-file tokenizer for ``path``; byte-level when no path is given."""
    if path is None:
        return ByteTokenizer()
    if not Path(path).is_file():
        raise TokenizerError(f"tokenizer file not found: {path}")
    return VocabTokenizer.from_file(path)
