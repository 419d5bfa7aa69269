import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from snforge.data import (TokenizedCorpus, detokenize, load_corpus, sample_batch, sample_offsets, save_corpus,
                          tokenize_bytes, validation_batches, windows_at)
from snforge.errors import FormatError, IngestionError


def test_byte_identity():
    assert tokenize_bytes(b"AB").tokens.tolist() == [65, 66]


@settings(max_examples=50, deadline=None)
@given(st.binary(min_size=1, max_size=300))
def test_round_trip(raw):
    assert detokenize(tokenize_bytes(raw).tokens) == raw


def test_mebibyte_token_count(tmp_path):
    raw = np.random.default_rng(0).integers(0, 256, 1 << 20, dtype=np.uint8).tobytes()
    p = tmp_path / "blob.bin"
    p.write_bytes(raw)
    c = load_corpus(p)
    assert len(c) == 1 << 20 and c.vocab_size == 256


def test_empty_input_rejected():
    with pytest.raises(IngestionError):
        tokenize_bytes(b"")


def test_split_is_disjoint_and_nonempty():
    c = tokenize_bytes(bytes(range(100)))
    assert len(c.validation) > 0 and len(c.train) + len(c.validation) == 100
    assert c.train_end == 90


def test_shift_by_one_at_forced_offset():
    c = TokenizedCorpus(np.arange(10), vocab_size=16, train_end=8)
    x, y = windows_at(c, [0], 3)
    assert x.tolist() == [[0, 1, 2]] and y.tolist() == [[1, 2, 3]]


def test_same_seed_same_batch(small_corpus):
    a = sample_batch(small_corpus, 4, 16, 99)
    b = sample_batch(small_corpus, 4, 16, 99)
    assert all(np.array_equal(u, v) for u, v in zip(a, b))


def test_different_seeds_different_offsets():
    c = TokenizedCorpus(np.arange(10_000) % 256)
    assert not np.array_equal(sample_offsets(c, 8, 32, 1), sample_offsets(c, 8, 32, 2))


def test_targets_shift_and_windows_stay_in_split():
    c = TokenizedCorpus(np.arange(2000) % 251, vocab_size=256, train_end=1500)
    for seed in range(20):
        for split, (lo, hi) in (("train", (0, 1500)), ("val", (1500, 2000))):
            off = sample_offsets(c, 8, 20, seed, split)
            assert np.all(off >= lo) and np.all(off + 20 < hi)
            x, y = windows_at(c, off, 20)
            assert np.array_equal(x[:, 1:], y[:, :-1])
            assert np.array_equal(y, c.tokens[off[:, None] + np.arange(1, 21)])


def test_corpus_too_short():
    c = TokenizedCorpus(np.arange(10), vocab_size=16, train_end=8)
    with pytest.raises(IngestionError):
        sample_batch(c, 1, 8, 0)


def test_validation_batches_are_fixed(small_corpus):
    a = validation_batches(small_corpus, 3, 4, 16)
    b = validation_batches(small_corpus, 3, 4, 16)
    assert all(np.array_equal(x[0], y[0]) for x, y in zip(a, b))


def test_snfc_cache_layout(tmp_path):
    c = tokenize_bytes(b"hello world")
    p = tmp_path / "c.snfc"
    save_corpus(c, p)
    raw = p.read_bytes()
    assert raw[:4] == b"SNFC"
    assert int.from_bytes(raw[4:8], "little") == 256
    assert int.from_bytes(raw[8:16], "little") == 11
    assert raw[16:18] == (104).to_bytes(2, "little")
    assert load_corpus(p).tokens.tolist() == c.tokens.tolist()


def test_truncated_cache(tmp_path):
    p = tmp_path / "bad.snfc"
    p.write_bytes(b"SNFC" + (256).to_bytes(4, "little") + (5).to_bytes(8, "little") + b"\x00\x00")
    with pytest.raises(FormatError):
        load_corpus(p)
