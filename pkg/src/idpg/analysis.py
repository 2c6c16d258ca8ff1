"""Cosine-similarity ranking of sentence pairs under two encoders."""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass

import numpy as np

from .errors import ContractError, UndefinedMetricError
from .tensor import Tape

TOPK = (100, 200, 300)


def cosine(u, v):
    u = np.asarray(u, dtype=np.float64).ravel()
    v = np.asarray(v, dtype=np.float64).ravel()
    if u.shape != v.shape:
        raise ContractError(f"cosine of vectors with {u.size} and {v.size} entries")
    nu, nv = np.linalg.norm(u), np.linalg.norm(v)
    if nu == 0.0 or nv == 0.0:
        raise UndefinedMetricError("cosine similarity with a zero vector")
    return float(np.clip(u @ v / (nu * nv), -1.0, 1.0))


@dataclass(frozen=True)
class PairScore:
    pair_id: int
    group: str
    score: float

    def __post_init__(self):
        if not abs(self.score) <= 1.0 + 1e-9:
            raise ContractError(f"pair {self.pair_id}: cosine score {self.score} outside [-1, 1]")


@dataclass(frozen=True)
class RankDistribution:
    k: int
    counts: dict

    def __post_init__(self):
        if sum(self.counts.values()) != self.k or min(self.counts.values(), default=0) < 0:
            raise ContractError("rank distribution counts must be nonnegative and sum to k")

    def to_record(self):
        return {"k": self.k, "counts": dict(sorted(self.counts.items()))}


def rank(pairs):
    """Descending by score; ties keep ascending pair id."""
    return sorted(pairs, key=lambda p: (-p.score, p.pair_id))


def topk_distribution(pairs, k, groups=None):
    """Per-group counts among the top ``k`` pairs.

    ``groups`` fixes the reported group set (zero counts included); by
    default it is every group that occurs in ``pairs``.
    """
    pairs = list(pairs)
    if not 0 <= k <= len(pairs):
        raise ContractError(f"k={k} must lie in [0, {len(pairs)}]")
    groups = sorted({p.group for p in pairs}) if groups is None else list(groups)
    counts = dict.fromkeys(groups, 0)
    counts.update(Counter(p.group for p in rank(pairs)[:k]))
    return RankDistribution(k, counts)


def quartile_groups(golds):
    """Bucket gold similarity scores into quartiles Q1 (lowest) .. Q4."""
    golds = np.asarray(golds, dtype=np.float64)
    edges = np.quantile(golds, [0.25, 0.5, 0.75])
    idx = np.searchsorted(edges, golds, side="right")
    return [f"Q{i + 1}" for i in idx]


def pair_scores(reps1, reps2, groups, ids=None):
    ids = range(len(groups)) if ids is None else ids
    return [PairScore(int(i), g, cosine(a, b)) for i, a, b, g in zip(ids, reps1, reps2, groups)]


def similarity_pairs(size, seed=0, min_len=3, max_len=8):
    """Toy graded-similarity pairs: s2 keeps a random share of s1's words and
    the gold score is their Jaccard overlap."""
    from .data import CONTENT_WORDS, Example, jaccard

    rng = np.random.default_rng(seed)
    out = []
    for i in range(size):
        length = int(rng.integers(min_len, max_len + 1))
        s1 = list(rng.choice(CONTENT_WORDS, size=length, replace=False))
        keep = int(rng.integers(0, length + 1))
        fresh = [w for w in CONTENT_WORDS if w not in s1]
        s2 = s1[:keep] + list(rng.choice(fresh, size=length - keep, replace=False))
        s2 = [s2[j] for j in rng.permutation(length)]
        a, b = " ".join(s1), " ".join(s2)
        out.append(Example(i, a, b, jaccard(a, b)))
    return out


def encode_sentences(model, vocab, sentences):
    """Each sentence alone through ``model``: h_CLS with its prompts (if any)."""
    out = []
    for s in sentences:
        ids = vocab.encode(s)
        out.append(model.hidden_cls([ids], Tape(model.dtype), texts=[(s, None)]).data[0])
    return np.stack(out)


def analyze(models, vocab, examples, ks=TOPK):
    """RankDistributions per model name for a pair dataset with graded golds."""
    groups = quartile_groups([ex.label for ex in examples])
    ids = [ex.id for ex in examples]
    out = {}
    for name, model in models.items():
        r1 = encode_sentences(model, vocab, [ex.s1 for ex in examples])
        r2 = encode_sentences(model, vocab, [ex.s2 for ex in examples])
        scores = pair_scores(r1, r2, groups, ids)
        out[name] = [topk_distribution(scores, min(k, len(scores)), sorted(set(groups)))
                     for k in ks]
    return out


def format_table(results):
    lines = []
    for name, dists in results.items():
        lines.append(f"[{name}]")
        groups = list(dists[0].counts) if dists else []
        lines.append("k\t" + "\t".join(groups))
        for dist in dists:
            lines.append(f"{dist.k}\t" + "\t".join(str(dist.counts[g]) for g in groups))
    return "\n".join(lines)
