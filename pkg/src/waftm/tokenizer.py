"""WordPiece tokenization with greedy longest-match-first subword splitting.

Vocabularies are plain UTF-8 files, one piece per line, line index = id.
Continuation pieces start with "##". The first four ids are reserved:
[PAD]=0, [UNK]=1, [BOS]=2, [EOS]=3.
"""

from __future__ import annotations

import string
from dataclasses import dataclass, field

PAD, UNK, BOS, EOS = 0, 1, 2, 3
SPECIAL_TOKENS = ("[PAD]", "[UNK]", "[BOS]", "[EOS]")

_MAX_WORD_CHARS = 100  # guard: longer words become a single [UNK]
_PUNCT = set(string.punctuation)


class VocabError(ValueError):
    """Vocabulary file violates the format contract."""


@dataclass(frozen=True)
class Vocabulary:
    tokens: tuple[str, ...]
    token_to_id: dict[str, int] = field(repr=False)

    def __len__(self) -> int:
        return len(self.tokens)

    def id_of(self, token: str) -> int:
        return self.token_to_id.get(token, UNK)

    def token_of(self, token_id: int) -> str:
        if not 0 <= token_id < len(self.tokens):
            raise IndexError(f"token id {token_id} out of range for |V|={len(self.tokens)}")
        return self.tokens[token_id]


@dataclass
class TokenSeq:
    """Token ids plus the logical length (everything before padding)."""

    ids: list[int]
    length: int

    def unpadded(self) -> list[int]:
        return self.ids[: self.length]


def make_vocab(tokens: list[str]) -> Vocabulary:
    mapping: dict[str, int] = {}
    for i, tok in enumerate(tokens):
        if tok in mapping:
            raise VocabError(f"duplicate token {tok!r} at line {i}")
        mapping[tok] = i
    for i, special in enumerate(SPECIAL_TOKENS):
        if mapping.get(special) != i:
            raise VocabError(
                f"missing special tokens: expected {special!r} at id {i}"
            )
    return Vocabulary(tuple(tokens), mapping)


def load_vocab(path) -> Vocabulary:
    with open(path, encoding="utf-8") as fh:
        tokens = [line.rstrip("\n") for line in fh]
    while tokens and tokens[-1] == "":
        tokens.pop()
    return make_vocab(tokens)


def save_vocab(vocab: Vocabulary, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for tok in vocab.tokens:
            fh.write(tok + "\n")


def normalize(text: str) -> list[str]:
    """Lowercase and split on whitespace; punctuation becomes its own word."""
    words: list[str] = []
    current: list[str] = []
    for ch in text.lower():
        if ch.isspace():
            if current:
                words.append("".join(current))
                current = []
        elif ch in _PUNCT:
            if current:
                words.append("".join(current))
                current = []
            words.append(ch)
        else:
            current.append(ch)
    if current:
        words.append("".join(current))
    return words


def wordpiece_split(word: str, vocab: Vocabulary) -> list[str]:
    """Greedy longest-match-first split; unmatchable remainder -> [UNK]."""
    if len(word) > _MAX_WORD_CHARS:
        return ["[UNK]"]
    pieces: list[str] = []
    start = 0
    while start < len(word):
        end = len(word)
        found = None
        while start < end:
            piece = word[start:end]
            if start > 0:
                piece = "##" + piece
            if piece in vocab.token_to_id:
                found = piece
                break
            end -= 1
        if found is None:
            return ["[UNK]"]
        pieces.append(found)
        start = end
    return pieces


def encode(text: str, vocab: Vocabulary, max_len: int) -> TokenSeq:
    """Tokenize, wrap with [BOS]/[EOS], truncate keeping [EOS], pad to max_len."""
    ids = [BOS]
    for word in normalize(text):
        for piece in wordpiece_split(word, vocab):
            ids.append(vocab.token_to_id[piece])
    ids.append(EOS)
    if len(ids) > max_len:
        ids = ids[: max_len - 1] + [EOS]
    length = len(ids)
    ids = ids + [PAD] * (max_len - length)
    return TokenSeq(ids, length)


def decode(tokens, vocab: Vocabulary) -> str:
    """Drop special tokens and fuse "##" continuations back into words."""
    ids = tokens.unpadded() if isinstance(tokens, TokenSeq) else list(tokens)
    words: list[str] = []
    for token_id in ids:
        piece = vocab.token_of(int(token_id))
        if piece in SPECIAL_TOKENS:
            continue
        if piece.startswith("##"):
            if words:
                words[-1] += piece[2:]
            else:
                words.append(piece[2:])
        else:
            words.append(piece)
    return " ".join(words)
