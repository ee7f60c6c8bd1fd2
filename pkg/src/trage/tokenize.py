"""Byte-pair tokenisation.

Every two consecutive bytes form one token; the vocabulary is closed-form:
five special tokens followed by all 65536 byte pairs.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import NotInvertible

PAD, MASK, CLS, SEP, UNK = 0, 1, 2, 3, 4
SPECIALS = ("[PAD]", "[MASK]", "[CLS]", "[SEP]", "[UNK]")
BYTE_PAIR_BASE = 5
VOCAB_SIZE = BYTE_PAIR_BASE + 65536


def pair_id(b1: int, b2: int) -> int:
    return BYTE_PAIR_BASE + (b1 << 8) + b2


@dataclass(frozen=True)
class TokenSequence:
    """Fixed-length token ids with attention mask; ``ids[0]`` is CLS."""

    ids: np.ndarray
    attn: np.ndarray
    real_len: int

    @property
    def max_len(self) -> int:
        return len(self.ids)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, TokenSequence):
            return NotImplemented
        return self.real_len == other.real_len and np.array_equal(self.ids, other.ids)

    def __hash__(self) -> int:
        return hash((self.real_len, self.ids.tobytes()))


def _pair_ids(data: bytes, limit: int) -> np.ndarray:
    raw = np.frombuffer(data[: 2 * limit], dtype=np.uint8)
    if len(raw) % 2:
        raw = np.append(raw, np.uint8(0))
    pairs = raw.reshape(-1, 2).astype(np.int32)
    return BYTE_PAIR_BASE + (pairs[:, 0] << 8) + pairs[:, 1]


def tokenize_bytes(data: bytes, max_len: int) -> TokenSequence:
    """Tokenise ``data`` into ``[CLS] + byte pairs``, truncated/padded to ``max_len``."""
    if max_len < 2:
        raise ValueError("max_len must be at least 2")
    ids = np.full(max_len, PAD, dtype=np.int32)
    ids[0] = CLS
    body = _pair_ids(bytes(data), max_len - 1)
    ids[1 : 1 + len(body)] = body
    real_len = 1 + len(body)
    attn = (ids != PAD).astype(np.int8)
    return TokenSequence(ids=ids, attn=attn, real_len=real_len)


def tokenize_batch(items: Sequence[bytes], max_len: int) -> tuple[np.ndarray, np.ndarray]:
    """Tokenise many byte strings into ``(ids [B, L], real_len [B])``."""
    ids = np.full((len(items), max_len), PAD, dtype=np.int32)
    lens = np.empty(len(items), dtype=np.int32)
    ids[:, 0] = CLS
    for i, data in enumerate(items):
        body = _pair_ids(bytes(data), max_len - 1)
        ids[i, 1 : 1 + len(body)] = body
        lens[i] = 1 + len(body)
    return ids, lens


def as_sequence(ids: np.ndarray) -> TokenSequence:
    ids = np.asarray(ids, dtype=np.int32)
    attn = (ids != PAD).astype(np.int8)
    return TokenSequence(ids=ids, attn=attn, real_len=int(attn.sum()))


def detokenize(seq: TokenSequence | Sequence[int]) -> bytes:
    """Invert :func:`tokenize_bytes`; special tokens are dropped.

    Raises :class:`NotInvertible` if MASK or UNK appear.
    """
    ids = np.asarray(seq.ids if isinstance(seq, TokenSequence) else seq, dtype=np.int64)
    if np.any((ids == MASK) | (ids == UNK)):
        raise NotInvertible("sequence contains MASK or UNK tokens")
    body = ids[ids >= BYTE_PAIR_BASE] - BYTE_PAIR_BASE
    out = np.empty(2 * len(body), dtype=np.uint8)
    out[0::2] = body >> 8
    out[1::2] = body & 0xFF
    return out.tobytes()


def token_repr(tok: int) -> str:
    if tok < BYTE_PAIR_BASE:
        return SPECIALS[tok]
    return f"{tok - BYTE_PAIR_BASE:04x}"
