"""Whitespace tokenizer with byte fallback.

Words are split on whitespace; any word not in the vocabulary is encoded
as its UTF-8 bytes (one token per byte, plus a trailing space byte that
delimits the word), so no content is ever lost to an unknown-token id.
Detokenization joins words with single spaces, i.e. round trips are exact
up to whitespace normalization.
"""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass, field
from typing import Iterable, Sequence

PAD, BOS, EOS, UNK = "<pad>", "<bos>", "<eos>", "<unk>"
_SPECIALS = (PAD, BOS, EOS, UNK)
_BYTE_TOKENS = tuple(f"<0x{b:02X}>" for b in range(256))
_SPACE_BYTE = 0x20


@dataclass(frozen=True)
class Vocab:
    """Dense token table: 4 specials, 256 byte tokens, then words."""

    tokens: tuple[str, ...]
    _index: dict[str, int] = field(init=False, repr=False, compare=False)

    def __post_init__(self) -> None:
        if self.tokens[: len(_SPECIALS)] != _SPECIALS:
            raise ValueError("vocab must start with the special tokens")
        if self.tokens[len(_SPECIALS): len(_SPECIALS) + 256] != _BYTE_TOKENS:
            raise ValueError("vocab must carry the 256 byte tokens after the specials")
        index = {tok: i for i, tok in enumerate(self.tokens)}
        if len(index) != len(self.tokens):
            raise ValueError("vocab tokens must be distinct")
        object.__setattr__(self, "_index", index)

    def __len__(self) -> int:
        return len(self.tokens)

    @property
    def pad_id(self) -> int:
        return 0

    @property
    def bos_id(self) -> int:
        return 1

    @property
    def eos_id(self) -> int:
        return 2

    @property
    def unk_id(self) -> int:
        return 3

    @property
    def special_ids(self) -> tuple[int, int, int, int]:
        return (0, 1, 2, 3)

    def _byte_id(self, b: int) -> int:
        return len(_SPECIALS) + b

    def lookup(self, token: str) -> int:
        return self._index[token]

    def tokenize(self, text: str) -> list[int]:
        """Encode text to token ids; unknown words fall back to byte tokens."""
        base = len(_SPECIALS) + 256
        ids: list[int] = []
        for word in text.split():
            idx = self._index.get(word)
            if idx is not None and idx >= base:
                ids.append(idx)
            else:
                # Specials typed out literally also take the byte path, so
                # user text can never smuggle control ids into a sequence.
                for b in word.encode("utf-8"):
                    ids.append(self._byte_id(b))
                ids.append(self._byte_id(_SPACE_BYTE))
        return ids

    def detokenize(self, ids: Sequence[int]) -> str:
        """Decode ids to text, skipping special ids and merging byte runs."""
        words: list[str] = []
        buf = bytearray()

        def flush() -> None:
            if buf:
                words.extend(bytes(buf).decode("utf-8", errors="replace").split())
                buf.clear()

        for i in ids:
            if i < len(_SPECIALS):
                flush()
                continue
            if i < len(_SPECIALS) + 256:
                buf.append(i - len(_SPECIALS))
            else:
                flush()
                words.append(self.tokens[i])
        flush()
        return " ".join(words)


def build_vocab(texts: Iterable[str], max_size: int = 2048) -> Vocab:
    """Build a vocabulary from corpus texts.

    Words are ranked by descending frequency (ties alphabetically) and kept
    up to ``max_size`` total entries including specials and byte tokens.
    """
    base = len(_SPECIALS) + 256
    if max_size <= base:
        raise ValueError(f"max_size must exceed {base} to fit any words")
    counts: Counter[str] = Counter()
    for text in texts:
        counts.update(text.split())
    reserved = set(_SPECIALS) | set(_BYTE_TOKENS)
    ranked = sorted((kv for kv in counts.items() if kv[0] not in reserved),
                    key=lambda kv: (-kv[1], kv[0]))
    words = tuple(w for w, _ in ranked[: max_size - base])
    return Vocab(tokens=_SPECIALS + _BYTE_TOKENS + words)
