"""Fixed-vocabulary tokenizer for affordance query words.

The token id space is dense and stable: four reserved ids (PAD=0, CLS=1,
SEP=2, UNK=3) followed by the affordance words in lexicographic order.
A query tokenizes to ``[CLS, id(word), SEP, PAD...]``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

PAD_ID = 0
CLS_ID = 1
SEP_ID = 2
UNK_ID = 3
RESERVED_TOKENS = ("<pad>", "<cls>", "<sep>", "<unk>")


@dataclass(frozen=True)
class Vocabulary:
    """Reserved tokens plus a sorted tuple of affordance words."""

    words: tuple[str, ...]

    def __post_init__(self):
        if list(self.words) != sorted(set(self.words)):
            raise ValueError("vocabulary words must be unique and lexicographically sorted")
        for w in self.words:
            if not w or not isinstance(w, str):
                raise ValueError(f"bad vocabulary word: {w!r}")
            if w in RESERVED_TOKENS:
                raise ValueError(f"word {w!r} collides with a reserved token")

    @classmethod
    def from_words(cls, words) -> "Vocabulary":
        return cls(tuple(sorted(set(words))))

    @property
    def size(self) -> int:
        return len(RESERVED_TOKENS) + len(self.words)

    def id_of(self, word: str) -> int:
        try:
            return len(RESERVED_TOKENS) + self.words.index(word)
        except ValueError:
            return UNK_ID

    def token_of(self, token_id: int) -> str:
        if 0 <= token_id < len(RESERVED_TOKENS):
            return RESERVED_TOKENS[token_id]
        idx = token_id - len(RESERVED_TOKENS)
        if 0 <= idx < len(self.words):
            return self.words[idx]
        raise ValueError(f"token id {token_id} out of range for vocabulary of size {self.size}")

    def __contains__(self, word: str) -> bool:
        return word in self.words


@dataclass
class TokenizedText:
    """Token ids plus an attention mask (True on non-PAD positions)."""

    ids: np.ndarray
    mask: np.ndarray = field(repr=False)

    def __post_init__(self):
        self.ids = np.asarray(self.ids, dtype=np.int64)
        self.mask = np.asarray(self.mask, dtype=bool)
        if self.ids.ndim != 1 or self.ids.shape != self.mask.shape:
            raise ValueError("ids and mask must be 1-d arrays of equal length")

    def __len__(self) -> int:
        return int(self.ids.shape[0])


def tokenize(word: str, vocab: Vocabulary, max_len: int = 4) -> TokenizedText:
    """Encode one query word as ``[CLS, id, SEP]`` padded to ``max_len``.

    Unknown words map to UNK; an empty word or ``max_len < 3`` is an error.
    """
    if not isinstance(word, str) or not word.strip():
        raise ValueError("cannot tokenize an empty query")
    if max_len < 3:
        raise ValueError(f"max_len must be >= 3 to fit [CLS, word, SEP], got {max_len}")
    ids = np.full(max_len, PAD_ID, dtype=np.int64)
    ids[0] = CLS_ID
    ids[1] = vocab.id_of(word.strip())
    ids[2] = SEP_ID
    mask = ids != PAD_ID
    # PAD_ID is 0 and never appears among the first three ids, so the mask is
    # exactly the non-PAD positions.
    return TokenizedText(ids=ids, mask=mask)


def detokenize(text: TokenizedText, vocab: Vocabulary) -> str:
    """Recover the query word; CLS/SEP/PAD are dropped, UNK renders as <unk>."""
    pieces = []
    for token_id in (int(i) for i in text.ids):
        if token_id in (PAD_ID, CLS_ID, SEP_ID):
            continue
        pieces.append(vocab.token_of(token_id))
    return " ".join(pieces)
