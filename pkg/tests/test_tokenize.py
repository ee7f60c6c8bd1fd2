import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from trage.errors import NotInvertible
from trage.tokenize import (
    CLS,
    MASK,
    PAD,
    UNK,
    VOCAB_SIZE,
    as_sequence,
    detokenize,
    pair_id,
    token_repr,
    tokenize_batch,
    tokenize_bytes,
)


def test_vocab_size():
    assert VOCAB_SIZE == 65541
    assert pair_id(0, 0) == 5 and pair_id(255, 255) == 65540


def test_pair_ids_bijective():
    ids = {pair_id(a, b) for a in range(256) for b in range(256)}
    assert len(ids) == 65536 and min(ids) == 5 and max(ids) == VOCAB_SIZE - 1


def test_four_byte_example():
    seq = tokenize_bytes(bytes.fromhex("b11eac20"), 8)
    assert seq.ids.tolist() == [CLS, 5 + 0xB11E, 5 + 0xAC20, PAD, PAD, PAD, PAD, PAD]
    assert seq.real_len == 3
    assert seq.attn.tolist() == [1, 1, 1, 0, 0, 0, 0, 0]


def test_empty():
    seq = tokenize_bytes(b"", 4)
    assert seq.ids.tolist() == [CLS, PAD, PAD, PAD] and seq.real_len == 1


def test_odd_byte_zero_padded():
    seq = tokenize_bytes(b"\xaa\xbb\xcc", 4)
    assert seq.ids.tolist() == [CLS, pair_id(0xAA, 0xBB), pair_id(0xCC, 0), PAD]
    assert seq.real_len == 3


def test_truncation():
    seq = tokenize_bytes(bytes(range(20)), 4)
    assert seq.real_len == 4 and seq.ids[3] == pair_id(4, 5)


def test_short_length_rejected():
    with pytest.raises(ValueError):
        tokenize_bytes(b"ab", 1)


def test_detokenize_zero_pair():
    assert detokenize([CLS, pair_id(0, 0), PAD, PAD]) == b"\x00\x00"


@pytest.mark.parametrize("bad", [MASK, UNK])
def test_detokenize_rejects_mask_and_unk(bad):
    with pytest.raises(NotInvertible):
        detokenize([CLS, pair_id(1, 2), bad, PAD])


def test_batch_matches_single():
    items = [b"", b"\x01", b"abcdef", bytes(100)]
    ids, lens = tokenize_batch(items, 16)
    for row, n, item in zip(ids, lens, items):
        single = tokenize_bytes(item, 16)
        assert np.array_equal(row, single.ids) and n == single.real_len


def test_token_repr():
    assert token_repr(CLS) == "[CLS]"
    assert token_repr(pair_id(0xB1, 0x1E)) == "b11e"


def test_as_sequence_counts_real_tokens():
    assert as_sequence(np.array([CLS, 9, 9, PAD])).real_len == 3


@settings(max_examples=300, deadline=None)
@given(st.binary(max_size=60).filter(lambda b: len(b) % 2 == 0), st.integers(2, 40))
def test_roundtrip(data, max_len):
    if len(data) >= 2 * (max_len - 1):
        data = data[: 2 * (max_len - 2)]
    assert detokenize(tokenize_bytes(data, max_len)) == data


@settings(max_examples=300, deadline=None)
@given(st.binary(max_size=300), st.integers(2, 64))
def test_invariants(data, max_len):
    seq = tokenize_bytes(data, max_len)
    assert len(seq.ids) == max_len
    assert seq.ids.max() < VOCAB_SIZE and seq.ids.min() >= 0
    assert seq.ids[0] == CLS
    assert np.array_equal(seq.attn == 1, seq.ids != PAD)
    assert seq.real_len == int(seq.attn.sum()) <= max_len
