"""Frozen hash-seeded stand-in for the narrative encoder.

Each token maps to a fixed pseudo-random vector seeded by a stable 64-bit
hash of the token string.  There are no trainable parameters, so the map
from text to token features cannot drift during training.
"""

from __future__ import annotations

import hashlib
import re
from dataclasses import dataclass
from functools import lru_cache
from typing import Iterable, Sequence

import numpy as np

from .numcore import DTYPE

NULL_TOKEN = "⌀"
DEFAULT_MAX_TOKENS = 64
DEFAULT_DIM = 48

_TOKEN_RE = re.compile(r"[^\W_]+|_")


@dataclass(frozen=True)
class TokenSeq:
    tokens: tuple[str, ...]

    def __len__(self) -> int:
        return len(self.tokens)

    def padded(self, length: int) -> "TokenSeq":
        if len(self.tokens) >= length:
            return TokenSeq(self.tokens[:length])
        return TokenSeq(self.tokens + (NULL_TOKEN,) * (length - len(self.tokens)))


def tokenize(text: str, max_tokens: int = DEFAULT_MAX_TOKENS) -> TokenSeq:
    """Lowercase, split on whitespace and punctuation, truncate; empty -> null token."""
    toks = tuple(t for t in _TOKEN_RE.findall(text.lower()) if t != "_")[:max_tokens]
    return TokenSeq(toks or (NULL_TOKEN,))


def token_hash(token: str) -> int:
    return int.from_bytes(hashlib.blake2b(token.encode("utf-8"), digest_size=8).digest(), "little")


@lru_cache(maxsize=65536)
def _token_vector(token: str, dim: int) -> np.ndarray:
    v = np.random.default_rng(token_hash(token)).standard_normal(dim)
    v.setflags(write=False)
    return v


class FrozenTextEncoder:
    def __init__(self, dim: int = DEFAULT_DIM, max_tokens: int = DEFAULT_MAX_TOKENS):
        self.dim = dim
        self.max_tokens = max_tokens

    def embed(self, tokens: TokenSeq) -> np.ndarray:
        return np.stack([_token_vector(t, self.dim) for t in tokens.tokens]).astype(DTYPE)

    def encode(self, text: str, pad: bool = True) -> np.ndarray:
        seq = tokenize(text, self.max_tokens)
        if pad:
            seq = seq.padded(self.max_tokens)
        return self.embed(seq)

    def encode_batch(self, texts: Sequence[str]) -> np.ndarray:
        return np.stack([self.encode(t) for t in texts])

    def table_hash(self, vocabulary: Iterable[str]) -> str:
        """Digest of the embedding rows for ``vocabulary`` (frozenness probe)."""
        h = hashlib.sha256()
        for tok in sorted(set(vocabulary)):
            h.update(tok.encode("utf-8"))
            h.update(_token_vector(tok, self.dim).astype("<f8").tobytes())
        return h.hexdigest()


def embed(tokens: TokenSeq, dim: int = DEFAULT_DIM) -> np.ndarray:
    return FrozenTextEncoder(dim).embed(tokens)


def mock_vocabulary() -> list[str]:
    """Every token the template narrators can emit."""
    from .heatmap import REGIONS
    from .mmnp.text import BANNED_CAUSAL, HEDGES, INTENSITY_WORDS, TENDENCY_WORDS

    words: set[str] = {NULL_TOKEN, "maximum", "minimum", "near", "z", "t", "u", "v",
                       "circulation", "be", "organized", "around", "the", "pattern",
                       "downstream", "warming", "cause", "force", "produce"}
    words |= set(INTENSITY_WORDS) | set(TENDENCY_WORDS) | set(HEDGES)
    for r in REGIONS:
        words |= set(tokenize(r).tokens)
    for b in BANNED_CAUSAL:
        words |= set(tokenize(b).tokens)
    words |= {str(i) for i in range(100)}
    return sorted(words)
