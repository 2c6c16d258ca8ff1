"""Sentence encoders that produce the generator's input representation."""

from __future__ import annotations

import numpy as np

from .errors import EmptyInputError, LengthError, ParseError
from .nn import Vocab


class EmbeddingTable:
    """Token -> vector map read from a word-vector text file."""

    def __init__(self, vectors, dim):
        self.vectors = vectors
        self.dim = dim

    def __contains__(self, token):
        return token in self.vectors

    def __len__(self):
        return len(self.vectors)

    def get(self, token):
        return self.vectors.get(token)

    @classmethod
    def load(cls, path):
        """Parse ``token v1 v2 ... v_dim`` lines; later duplicates win."""
        vectors, dim = {}, None
        with open(path, encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, 1):
                parts = line.rstrip("\n").split(" ")
                if not line.strip():
                    continue
                token, values = parts[0], parts[1:]
                if dim is None:
                    dim = len(values)
                    if dim == 0:
                        raise ParseError("first line carries no vector", lineno)
                if len(values) != dim:
                    raise ParseError(f"expected {dim} values, got {len(values)}", lineno)
                try:
                    vectors[token] = np.array([float(v) for v in values], dtype=np.float64)
                except ValueError as exc:
                    raise ParseError(str(exc), lineno) from None
        if dim is None:
            raise ParseError("embedding file is empty")
        return cls(vectors, dim)

    def save(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            for token, vec in self.vectors.items():
                fh.write(token + " " + " ".join(repr(float(v)) for v in vec) + "\n")


def encode_bag_of_vectors(tokens, table):
    """Mean word vector; tokens missing from the table count as zero vectors."""
    tokens = list(tokens)
    if not tokens:
        raise EmptyInputError("bag-of-vectors encoding of an empty token list")
    total = np.zeros(table.dim, dtype=np.float64)
    for tok in tokens:
        vec = table.get(tok)
        if vec is not None:
            total += vec
    return total / len(tokens)


def sentence_tokens(s1, s2=None):
    return Vocab.split(s1) + (Vocab.split(s2) if s2 is not None else [])


def encode_backbone_cls(backbone, token_ids):
    """Final-layer position-0 states of the bare inputs, computed without gradients.

    Accepts one id list or a batch of them; returns [d] or [B, d].
    """
    single = bool(token_ids) and isinstance(token_ids[0], (int, np.integer))
    batch = [token_ids] if single else list(token_ids)
    if not batch or any(len(x) == 0 for x in batch):
        raise LengthError("empty input to the sentence encoder")
    reps = backbone.encode(batch).cls.data.copy()
    return reps[0] if single else reps


class RepCache:
    """Sentence representations keyed by (dataset id, example id)."""

    def __init__(self):
        self._store = {}

    def __contains__(self, key):
        return key in self._store

    def __len__(self):
        return len(self._store)

    def get(self, key):
        return self._store.get(key)

    def put(self, key, rep):
        if key not in self._store:
            self._store[key] = np.array(rep, copy=True)
        return self._store[key]
