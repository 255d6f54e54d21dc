"""Word-level vocabulary and token-sequence encoding.

Tokens are whitespace-delimited and lowercased, except for the reserved
special tokens which are matched exactly. Reserved tokens always occupy
ids 0 through 6.
"""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable

import numpy as np

RESERVED_TOKENS = ("[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]", "[COL]", "[VAL]")
PAD_ID, UNK_ID, CLS_ID, SEP_ID, MASK_ID, COL_ID, VAL_ID = range(7)
NUM_RESERVED = len(RESERVED_TOKENS)

_RESERVED_SET = frozenset(RESERVED_TOKENS)
_RESERVED_FOLDED = frozenset(t.lower() for t in RESERVED_TOKENS)


@dataclass
class Vocabulary:
    """Bijective token/id mapping with reserved tokens at ids 0-6."""

    id_to_token: list[str]
    token_to_id: dict[str, int]

    @classmethod
    def from_tokens(cls, extra_tokens: Iterable[str]) -> "Vocabulary":
        id_to_token = list(RESERVED_TOKENS)
        for token in extra_tokens:
            id_to_token.append(token)
        token_to_id = {token: i for i, token in enumerate(id_to_token)}
        if len(token_to_id) != len(id_to_token):
            raise ValueError("vocabulary tokens must be unique")
        return cls(id_to_token=id_to_token, token_to_id=token_to_id)

    def __len__(self) -> int:
        return len(self.id_to_token)

    def __contains__(self, token: str) -> bool:
        return token in self.token_to_id

    def lookup(self, token: str) -> int:
        """Map one whitespace token to an id; unknown tokens map to [UNK]."""
        if token in _RESERVED_SET:
            return self.token_to_id[token]
        return self.token_to_id.get(token.lower(), UNK_ID)

    def token(self, token_id: int) -> str:
        return self.id_to_token[token_id]

    def save(self, path: str | Path) -> None:
        """One token per line; the line number is the id."""
        Path(path).write_text("\n".join(self.id_to_token) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "Vocabulary":
        lines = Path(path).read_text(encoding="utf-8").splitlines()
        if tuple(lines[:NUM_RESERVED]) != RESERVED_TOKENS:
            raise ValueError(f"vocabulary file {path} does not start with the reserved tokens")
        return cls.from_tokens(lines[NUM_RESERVED:])


def build_vocab(corpus: Iterable[str], max_size: int = 2000, min_freq: int = 1) -> Vocabulary:
    """Most-frequent lowercased tokens, ties broken lexicographically."""
    if max_size <= NUM_RESERVED:
        raise ValueError(f"max_size must exceed {NUM_RESERVED}, got {max_size}")
    counts: Counter[str] = Counter()
    for text in corpus:
        for token in text.split():
            folded = token.lower()
            if folded in _RESERVED_FOLDED:
                continue
            counts[folded] += 1
    eligible = [(t, c) for t, c in counts.items() if c >= min_freq]
    eligible.sort(key=lambda tc: (-tc[1], tc[0]))
    return Vocabulary.from_tokens(t for t, _ in eligible[: max_size - NUM_RESERVED])


@dataclass
class TokenSequence:
    """Integer token ids with a parallel attention mask (1 = real token)."""

    ids: list[int]
    attention_mask: list[int]
    max_len: int

    def __post_init__(self) -> None:
        if len(self.ids) != len(self.attention_mask):
            raise ValueError("ids and attention_mask lengths differ")
        if len(self.ids) > self.max_len:
            raise ValueError(f"sequence length {len(self.ids)} exceeds max_len {self.max_len}")

    def __len__(self) -> int:
        return len(self.ids)


def _drop_last_droppable(segment: list[int]) -> bool:
    """Remove the last non-reserved token of a segment, if any."""
    for i in range(len(segment) - 1, -1, -1):
        if segment[i] >= NUM_RESERVED:
            del segment[i]
            return True
    return False


def _truncate_pair(ids: list[int], max_len: int) -> list[int]:
    sep1 = ids.index(SEP_ID)
    left, right = ids[1:sep1], ids[sep1 + 1 : -1]
    allowed = max_len - 3
    while len(left) + len(right) > allowed:
        # the longer segment loses its tail first; ties trim the right side
        primary, secondary = (left, right) if len(left) > len(right) else (right, left)
        if not _drop_last_droppable(primary) and not _drop_last_droppable(secondary):
            break
    # degenerate marker-only overflow: hard-trim segment tails
    while len(left) + len(right) > allowed and right:
        right.pop()
    while len(left) + len(right) > allowed and left:
        left.pop()
    return [CLS_ID, *left, SEP_ID, *right, SEP_ID]


def _truncate_flat(ids: list[int], max_len: int) -> list[int]:
    out = list(ids)
    while len(out) > max_len and _drop_last_droppable(out):
        pass
    return out[:max_len]


def encode(text: str, vocab: Vocabulary, max_len: int) -> TokenSequence:
    """Tokenize and map to ids, truncating over-length sequences.

    Pair inputs ([CLS] ... [SEP] ... [SEP]) lose non-reserved tokens from
    the tail of the longer segment until they fit, so [CLS] and both
    [SEP] markers always survive. Other inputs are trimmed at the tail.
    No padding is applied; the mask marks every kept token as real.
    """
    ids = [vocab.lookup(t) for t in text.split()]
    if len(ids) > max_len:
        is_pair = bool(ids) and ids[0] == CLS_ID and ids[-1] == SEP_ID and ids.count(SEP_ID) == 2
        ids = _truncate_pair(ids, max_len) if is_pair else _truncate_flat(ids, max_len)
    return TokenSequence(ids=ids, attention_mask=[1] * len(ids), max_len=max_len)


def decode(ids: Iterable[int], vocab: Vocabulary) -> str:
    return " ".join(vocab.token(i) for i in ids)


def pad_batch(sequences: list[TokenSequence]) -> tuple[np.ndarray, np.ndarray]:
    """Stack sequences into (ids, mask) arrays padded with [PAD] to the batch max."""
    if not sequences:
        raise ValueError("cannot pad an empty batch")
    width = max(len(s) for s in sequences)
    ids = np.full((len(sequences), width), PAD_ID, dtype=np.int64)
    mask = np.zeros((len(sequences), width), dtype=np.float64)
    for row, seq in enumerate(sequences):
        ids[row, : len(seq)] = seq.ids
        mask[row, : len(seq)] = seq.attention_mask
    return ids, mask
