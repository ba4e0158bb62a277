"""Text handling: tokenization with abbreviation expansion, vocabulary
construction, and the trainable word-embedding table.

Tokenization lowercases, turns punctuation into separators, and collapses
every digit run into the NUM sentinel token. Clinical abbreviations are
expanded in a single pass (no recursive expansion). The embedding table is a
plain Parameter so its rows train with everything else.
"""

from __future__ import annotations

import re
from collections import Counter
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .numerics import Parameter

# Digit runs become this sentinel. "0" survives re-tokenization, which keeps
# tokenize idempotent on its own output.
NUM = "0"

PAD_TOKEN = "<pad>"
UNK_TOKEN = "<unk>"
PAD_ID = 0
UNK_ID = 1

_NON_ALNUM_RE = re.compile(r"[^a-z0-9]+")
_DIGIT_RUN_RE = re.compile(r"[0-9]+")


class AbbreviationError(ValueError):
    """Raised for malformed abbreviation tables."""


class EmbeddingFormatError(ValueError):
    """Raised for malformed word-vector files; message carries the line number."""


def _base_tokens(text: str) -> list[str]:
    text = _NON_ALNUM_RE.sub(" ", text.lower())
    text = _DIGIT_RUN_RE.sub(f" {NUM} ", text)
    return text.split()


@dataclass(frozen=True)
class AbbreviationTable:
    """Case-normalized abbreviation -> expansion token sequence."""

    entries: dict[str, tuple[str, ...]] = field(default_factory=dict)

    @classmethod
    def from_pairs(cls, pairs: Iterable[tuple[str, str]]) -> "AbbreviationTable":
        entries: dict[str, tuple[str, ...]] = {}
        for abbrev, expansion in pairs:
            key_tokens = _base_tokens(abbrev)
            if len(key_tokens) != 1:
                raise AbbreviationError(f"abbreviation {abbrev!r} must normalize to a single token")
            key = key_tokens[0]
            exp = tuple(_base_tokens(expansion))
            if not exp:
                raise AbbreviationError(f"empty expansion for abbreviation {abbrev!r}")
            if exp == (key,):
                raise AbbreviationError(f"abbreviation {abbrev!r} maps to itself")
            entries[key] = exp
        return cls(entries)

    @classmethod
    def from_tsv(cls, path) -> "AbbreviationTable":
        pairs = []
        with open(path, encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, start=1):
                line = line.rstrip("\n")
                if not line or line.startswith("#"):
                    continue
                parts = line.split("\t")
                if len(parts) != 2:
                    raise AbbreviationError(f"{path}:{lineno}: expected 2 tab-separated fields")
                pairs.append((parts[0], parts[1]))
        return cls.from_pairs(pairs)

    def __len__(self) -> int:
        return len(self.entries)


def tokenize(text: str, abbrev: AbbreviationTable | None = None) -> list[str]:
    """Lowercased, punctuation-stripped tokens with digit runs collapsed to NUM.

    Abbreviations are replaced by their expansions in one pass; expansions are
    never themselves re-expanded.
    """
    tokens = _base_tokens(text)
    if abbrev is None or not abbrev.entries:
        return tokens
    out: list[str] = []
    for tok in tokens:
        exp = abbrev.entries.get(tok)
        if exp is None:
            out.append(tok)
        else:
            out.extend(exp)
    return out


@dataclass
class Vocabulary:
    """Dense token<->id mapping with PAD=0 and UNK=1 reserved."""

    id_to_token: list[str]
    token_to_id: dict[str, int]
    min_freq: int = 1

    def __len__(self) -> int:
        return len(self.id_to_token)

    def __contains__(self, token: str) -> bool:
        return token in self.token_to_id

    def encode(self, tokens: Sequence[str]) -> np.ndarray:
        return np.array([self.token_to_id.get(t, UNK_ID) for t in tokens], dtype=np.int64)

    def token(self, idx: int) -> str:
        return self.id_to_token[idx]

    @classmethod
    def from_tokens(cls, id_to_token: Sequence[str], min_freq: int = 1) -> "Vocabulary":
        id_to_token = list(id_to_token)
        if id_to_token[:2] != [PAD_TOKEN, UNK_TOKEN]:
            raise ValueError("vocabulary must start with the reserved PAD and UNK tokens")
        return cls(id_to_token, {t: i for i, t in enumerate(id_to_token)}, min_freq)


def build_vocab(corpus: Iterable[Sequence[str]], min_freq: int = 1) -> Vocabulary:
    """Frequency-thresholded vocabulary; ordering is frequency desc then lexicographic."""
    if min_freq < 1:
        raise ValueError("min_freq must be >= 1")
    counts: Counter[str] = Counter()
    for tokens in corpus:
        counts.update(tokens)
    kept = sorted(
        (t for t, c in counts.items() if c >= min_freq),
        key=lambda t: (-counts[t], t),
    )
    id_to_token = [PAD_TOKEN, UNK_TOKEN] + kept
    return Vocabulary.from_tokens(id_to_token, min_freq)


@dataclass
class EmbeddingTable:
    """|V| x D trainable embedding matrix. Row 0 (PAD) starts at zero and is
    masked out of pooling downstream, so it never receives gradient."""

    param: Parameter
    dim: int

    @property
    def vocab_size(self) -> int:
        return self.param.value.shape[0]


def _parse_vector_file(path) -> dict[str, np.ndarray]:
    vectors: dict[str, np.ndarray] = {}
    dim: int | None = None
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line:
                continue
            parts = line.split(" ")
            if len(parts) < 2:
                raise EmbeddingFormatError(f"{path}:{lineno}: expected token plus vector components")
            if dim is None:
                dim = len(parts) - 1
            elif len(parts) - 1 != dim:
                raise EmbeddingFormatError(
                    f"{path}:{lineno}: expected {dim} components, found {len(parts) - 1}"
                )
            try:
                vectors[parts[0]] = np.array([float(v) for v in parts[1:]], dtype=np.float64)
            except ValueError as exc:
                raise EmbeddingFormatError(f"{path}:{lineno}: non-numeric vector component") from exc
    return vectors


def load_embeddings(path, vocab: Vocabulary, dim: int = 100, seed: int = 0) -> EmbeddingTable:
    """Build the embedding table from an optional textual word-vector file.

    Tokens found in the file take its vectors; everything else is sampled
    i.i.d. normal with mean 0 and per-dimension std matched to the loaded
    vectors (0.1 when there is no file). Deterministic given the seed.
    """
    vectors = _parse_vector_file(path) if path is not None else {}
    if vectors:
        dim = len(next(iter(vectors.values())))
        loaded = np.stack(list(vectors.values()))
        std = loaded.std(axis=0) if loaded.shape[0] > 1 else np.full(dim, 0.1)
        std = np.where(std > 0, std, 0.1)
    else:
        std = np.full(dim, 0.1)

    rng = np.random.default_rng(seed)
    table = np.zeros((len(vocab), dim), dtype=np.float64)
    for idx, token in enumerate(vocab.id_to_token):
        if idx == PAD_ID:
            continue
        vec = vectors.get(token)
        if vec is not None:
            table[idx] = vec
        else:
            table[idx] = rng.normal(0.0, 1.0, dim) * std
    return EmbeddingTable(Parameter("embedding", table), dim)


def lookup(table: EmbeddingTable, ids: Sequence[int]) -> np.ndarray:
    """Rows of the embedding matrix for a token-id sequence (T x D)."""
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= table.vocab_size):
        raise IndexError(f"token id out of range [0, {table.vocab_size})")
    return table.param.value[ids].reshape(len(ids), table.dim)


def lookup_backward(table: EmbeddingTable, ids: Sequence[int], dout: np.ndarray) -> None:
    """Accumulate gradients of the looked-up rows back into the table."""
    ids = np.asarray(ids, dtype=np.int64)
    np.add.at(table.param.grad, ids, dout)
