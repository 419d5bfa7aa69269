"""Byte-level corpora, the SNFC cache file and window sampling."""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import FormatError, IngestionError

CORPUS_MAGIC = b"SNFC"
BYTE_VOCAB = 256
DEFAULT_VAL_FRACTION = 0.1


@dataclass(frozen=True)
class TokenizedCorpus:
    """Token stream plus a fixed train/validation split.

    ``train_end`` is the first validation offset; validation runs to the end of
    the stream, so the two ranges never overlap.
    """

    tokens: np.ndarray
    vocab_size: int = BYTE_VOCAB
    train_end: int | None = None

    def __post_init__(self):
        toks = np.ascontiguousarray(self.tokens, dtype=np.uint16)
        object.__setattr__(self, "tokens", toks)
        toks.setflags(write=False)
        if toks.size == 0:
            raise IngestionError("corpus is empty")
        if toks.max() >= self.vocab_size:
            raise IngestionError(f"token id {int(toks.max())} >= vocab_size {self.vocab_size}")
        end = self.train_end
        if end is None:
            end = len(toks) - max(1, int(len(toks) * DEFAULT_VAL_FRACTION))
        if not 0 <= end < len(toks):
            raise IngestionError(f"train/validation boundary {end} outside stream of {len(toks)}")
        object.__setattr__(self, "train_end", int(end))

    def __len__(self) -> int:
        return len(self.tokens)

    @property
    def train(self) -> np.ndarray:
        return self.tokens[: self.train_end]

    @property
    def validation(self) -> np.ndarray:
        return self.tokens[self.train_end:]

    def with_split(self, val_fraction: float) -> "TokenizedCorpus":
        n_val = max(1, int(len(self.tokens) * val_fraction))
        return TokenizedCorpus(self.tokens, self.vocab_size, len(self.tokens) - n_val)

    def slice(self, start: int, stop: int, val_fraction: float = DEFAULT_VAL_FRACTION) -> "TokenizedCorpus":
        """A fresh corpus over ``tokens[start:stop]`` with its own tail split."""
        sub = self.tokens[start:stop]
        n_val = max(1, int(len(sub) * val_fraction))
        return TokenizedCorpus(sub, self.vocab_size, len(sub) - n_val)


def tokenize_bytes(text: bytes | str, val_fraction: float = DEFAULT_VAL_FRACTION) -> TokenizedCorpus:
    if isinstance(text, str):
        text = text.encode("utf-8")
    if len(text) == 0:
        raise IngestionError("cannot tokenize empty input")
    toks = np.frombuffer(bytes(text), dtype=np.uint8).astype(np.uint16)
    n_val = max(1, int(len(toks) * val_fraction))
    return TokenizedCorpus(toks, BYTE_VOCAB, len(toks) - n_val)


def detokenize(tokens) -> bytes:
    return np.asarray(tokens, dtype=np.uint8).tobytes()


def save_corpus(corpus: TokenizedCorpus, path: str | Path) -> None:
    """Write the SNFC cache: magic, u32 vocab, u64 count, u16 LE ids.

    The split offset is not part of the format; readers re-derive it from the
    default tail fraction.
    """
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(CORPUS_MAGIC)
        fh.write(struct.pack("<IQ", corpus.vocab_size, len(corpus.tokens)))
        fh.write(corpus.tokens.astype("<u2").tobytes())
    tmp.replace(path)


def load_corpus(path: str | Path, val_fraction: float = DEFAULT_VAL_FRACTION) -> TokenizedCorpus:
    """Load an SNFC cache, or tokenize any other file as raw bytes."""
    path = Path(path)
    if not path.is_file():
        raise IngestionError(f"corpus file not found: {path}")
    raw = path.read_bytes()
    if raw[:4] != CORPUS_MAGIC:
        return tokenize_bytes(raw, val_fraction)
    if len(raw) < 16:
        raise FormatError(f"{path}: truncated SNFC header")
    vocab, count = struct.unpack_from("<IQ", raw, 4)
    payload = raw[16:]
    if len(payload) != 2 * count:
        raise FormatError(f"{path}: expected {count} tokens, found {len(payload) // 2}")
    toks = np.frombuffer(payload, dtype="<u2").astype(np.uint16)
    n_val = max(1, int(count * val_fraction))
    return TokenizedCorpus(toks, vocab, int(count) - n_val)


def _region(corpus: TokenizedCorpus, split: str) -> tuple[int, int]:
    if split == "train":
        return 0, corpus.train_end
    if split in ("val", "validation"):
        return corpus.train_end, len(corpus.tokens)
    raise ValueError(f"unknown split {split!r}")


def sample_offsets(corpus: TokenizedCorpus, batch: int, seq_len: int, rng_seed: int,
                   split: str = "train") -> np.ndarray:
    lo, hi = _region(corpus, split)
    span = hi - lo - seq_len
    if span < 1:
        raise IngestionError(f"{split} split of {hi - lo} tokens is shorter than seq_len+1={seq_len + 1}")
    rng = np.random.default_rng(rng_seed)
    return lo + rng.integers(0, span, size=batch)


def windows_at(corpus: TokenizedCorpus, offsets, seq_len: int) -> tuple[np.ndarray, np.ndarray]:
    offsets = np.asarray(offsets, dtype=np.int64)
    idx = offsets[:, None] + np.arange(seq_len + 1)[None, :]
    win = corpus.tokens[idx].astype(np.int64)
    return win[:, :-1], win[:, 1:]


def sample_batch(corpus: TokenizedCorpus, batch: int, seq_len: int, rng_seed: int,
                 split: str = "train") -> tuple[np.ndarray, np.ndarray]:
    """Random windows of ``seq_len`` inputs with next-token targets.

    Windows are drawn wholly inside one split, so they never straddle the
    train/validation boundary.
    """
    offsets = sample_offsets(corpus, batch, seq_len, rng_seed, split)
    return windows_at(corpus, offsets, seq_len)


def validation_batches(corpus: TokenizedCorpus, n_batches: int, batch: int, seq_len: int):
    """Deterministic, evenly strided validation windows (fixed evaluation set)."""
    lo, hi = _region(corpus, "val")
    span = hi - lo - seq_len
    if span < 1:
        raise IngestionError(f"validation split of {hi - lo} tokens is shorter than seq_len+1={seq_len + 1}")
    total = n_batches * batch
    offsets = lo + (np.arange(total, dtype=np.int64) * span) // max(total, 1)
    out = []
    for i in range(n_batches):
        out.append(windows_at(corpus, offsets[i * batch:(i + 1) * batch], seq_len))
    return out


def synthetic_text(n_bytes: int, seed: int = 0, order: int = 2, alphabet: bytes | None = None,
                   concentration: float = 0.15) -> bytes:
    """Sample text from a random sparse Markov chain over a small alphabet.

    Gives toy runs a corpus with learnable but non-trivial structure.
    """
    rng = np.random.default_rng(seed)
    alphabet = alphabet or b"abcdefghijklmnop ,.\n"
    k = len(alphabet)
    n_ctx = k ** order
    probs = rng.dirichlet(np.full(k, concentration), size=n_ctx)
    cdf = np.cumsum(probs, axis=1)
    cdf[:, -1] = 1.0
    u = rng.random(n_bytes)
    out = np.empty(n_bytes, dtype=np.int64)
    ctx = 0
    mod = n_ctx
    for i in range(n_bytes):
        s = int(np.searchsorted(cdf[ctx], u[i], side="right"))
        out[i] = s
        ctx = (ctx * k + s) % mod
    return np.frombuffer(alphabet, dtype=np.uint8)[out].tobytes()
