"""Unit-norm phrase embeddings with a controlled pairwise-cosine structure.

The mock encoder realizes a declared Gram matrix exactly (eigendecomposition
of G = L L^T, rows of L padded and rotated by a seeded orthogonal matrix), so
tests and queries can rely on known cosines. Real encoder output can be
loaded from the same vocab.bin file format instead.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .errors import UnknownPhraseError

VOCAB_MAGIC = b"RVOC"

OBJECT_CLASSES = ("sphere", "box", "floor", "background")
PREDICATES = (
    "standing on",
    "supporting",
    "above",
    "below",
    "next to",
    "same as",
    "inside",
    "containing",
    "part of",
    "has part",
)
CANONICAL_PHRASES = ("and", "next to", "none")
NULL_PHRASE = "none"

DEFAULT_VOCAB = tuple(OBJECT_CLASSES) + tuple(PREDICATES) + ("and", "none")

# Related concepts close, contradictory ones apart; 2x2 blocks keep this PSD.
DEFAULT_SIMILARITIES = {
    ("standing on", "supporting"): 0.3,
    ("above", "below"): -0.5,
    ("inside", "containing"): 0.3,
    ("part of", "has part"): 0.3,
}

INVERSE_PREDICATE = {
    "standing on": "supporting",
    "supporting": "standing on",
    "above": "below",
    "below": "above",
    "inside": "containing",
    "containing": "inside",
    "part of": "has part",
    "has part": "part of",
    "next to": "next to",
    "same as": "same as",
}
SYMMETRIC_PREDICATES = ("next to", "same as")


@dataclass
class EmbeddingTable:
    """Ordered phrases with unit-norm embeddings and the Gram they realize."""

    phrases: list[str]
    embeddings: np.ndarray  # (n, D) float64, rows unit-norm
    declared_gram: np.ndarray  # (n, n)

    def __post_init__(self):
        self._index = {p: i for i, p in enumerate(self.phrases)}

    @property
    def dim(self) -> int:
        return self.embeddings.shape[1]

    def __contains__(self, phrase: str) -> bool:
        return phrase in self._index

    def embedding(self, phrase: str) -> np.ndarray:
        try:
            return self.embeddings[self._index[phrase]]
        except KeyError:
            raise UnknownPhraseError(phrase, self.phrases) from None

    def mean_embedding(self, phrases) -> np.ndarray:
        """Normalized mean of several phrase embeddings."""
        m = np.mean([self.embedding(p) for p in phrases], axis=0)
        n = np.linalg.norm(m)
        if n == 0:
            raise ValueError(f"phrases {phrases} have a zero mean embedding")
        return m / n

    def realized_gram(self) -> np.ndarray:
        return self.embeddings @ self.embeddings.T


def build_gram(vocabulary, similarities) -> np.ndarray:
    n = len(vocabulary)
    idx = {p: i for i, p in enumerate(vocabulary)}
    g = np.eye(n)
    for (a, b), c in similarities.items():
        if a not in idx or b not in idx:
            raise ValueError(f"similarity entry ({a!r}, {b!r}) not in vocabulary")
        g[idx[a], idx[b]] = c
        g[idx[b], idx[a]] = c
    return g


def build_embedding_table(
    vocabulary,
    similarities=None,
    dim: int = 16,
    seed: int = 0,
    exact: bool = True,
) -> EmbeddingTable:
    """Realize the declared Gram matrix as unit-norm embeddings.

    With `exact`, a non-PSD Gram or dim < len(vocabulary) is an error;
    otherwise negative eigenvalues are clipped and rows re-normalized.
    """
    vocabulary = list(vocabulary)
    if len(set(vocabulary)) != len(vocabulary):
        raise ValueError("vocabulary has duplicate phrases")
    gram = similarities if isinstance(similarities, np.ndarray) else build_gram(
        vocabulary, similarities or {}
    )
    gram = np.asarray(gram, dtype=np.float64)
    n = len(vocabulary)
    if gram.shape != (n, n):
        raise ValueError(f"Gram must be {n}x{n}")
    if np.abs(gram - gram.T).max() > 1e-12 or np.abs(np.diag(gram) - 1.0).max() > 1e-12:
        raise ValueError("Gram must be symmetric with unit diagonal")
    evals, evecs = np.linalg.eigh(gram)
    if exact:
        if evals.min() < -1e-8:
            raise ValueError(f"declared Gram is not PSD (min eigenvalue {evals.min():.3g})")
        if dim < n:
            raise ValueError(f"dim {dim} < vocabulary size {n}; exact realization impossible")
    factors = evecs * np.sqrt(np.clip(evals, 0.0, None))
    emb = np.zeros((n, dim))
    emb[:, : min(dim, n)] = factors[:, ::-1][:, : min(dim, n)]  # largest eigenvalues first
    rng = np.random.default_rng(np.random.SeedSequence(seed))
    q = _random_orthogonal(dim, rng)
    emb = emb @ q
    emb /= np.linalg.norm(emb, axis=1, keepdims=True)
    return EmbeddingTable(phrases=vocabulary, embeddings=emb, declared_gram=gram)


def _random_orthogonal(dim: int, rng) -> np.ndarray:
    a = rng.normal(size=(dim, dim))
    q, r = np.linalg.qr(a)
    return q * np.sign(np.diag(r))  # fix column signs for determinism


def default_table(dim: int = 16, seed: int = 0) -> EmbeddingTable:
    return build_embedding_table(DEFAULT_VOCAB, DEFAULT_SIMILARITIES, dim=dim, seed=seed)


def save_vocab(table: EmbeddingTable, path) -> None:
    """vocab.bin: magic, count, D; length-prefixed UTF-8 phrases; float32 rows."""
    with open(path, "wb") as f:
        f.write(VOCAB_MAGIC)
        f.write(struct.pack("<II", len(table.phrases), table.dim))
        for p in table.phrases:
            raw = p.encode("utf-8")
            f.write(struct.pack("<H", len(raw)))
            f.write(raw)
        f.write(np.ascontiguousarray(table.embeddings, dtype="<f4").tobytes())


def load_vocab(path) -> EmbeddingTable:
    with open(path, "rb") as f:
        if f.read(4) != VOCAB_MAGIC:
            raise ValueError(f"{path}: not a vocab.bin file")
        count, dim = struct.unpack("<II", f.read(8))
        phrases = []
        for _ in range(count):
            (ln,) = struct.unpack("<H", f.read(2))
            phrases.append(f.read(ln).decode("utf-8"))
        emb = np.frombuffer(f.read(count * dim * 4), dtype="<f4").reshape(count, dim)
    emb = emb.astype(np.float64)
    emb /= np.linalg.norm(emb, axis=1, keepdims=True)
    return EmbeddingTable(phrases=phrases, embeddings=emb, declared_gram=emb @ emb.T)
