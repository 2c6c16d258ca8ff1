"""Toy post-norm transformer encoder used as the frozen backbone, plus the head."""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import asdict, dataclass

import numpy as np

from . import tensor as F
from .errors import ConfigError, DimensionError, LengthError, VocabError
from .tensor import Tensor

CLS, UNK, SEP, EOS, PAD = 0, 1, 2, 3, 4
SPECIAL_TOKENS = ("[CLS]", "[UNK]", "[SEP]", "[EOS]", "[PAD]")
MASK_VALUE = -1e9


@dataclass(frozen=True)
class TransformerConfig:
    num_layers: int = 2
    hidden: int = 32
    heads: int = 2
    ffn_inner: int = 64
    vocab_size: int = 1000
    max_seq: int = 64
    dropout_rate: float = 0.0
    init_std: float = 0.5
    # positions start small so a random frozen encoder still pools word identity
    pos_init_std: float = 0.02

    def __post_init__(self):
        for name in ("num_layers", "hidden", "heads", "ffn_inner", "vocab_size", "max_seq"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.hidden % self.heads:
            raise ConfigError(f"heads={self.heads} does not divide hidden={self.hidden}")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ConfigError(f"dropout_rate must lie in [0, 1), got {self.dropout_rate}")
        if self.vocab_size <= PAD:
            raise ConfigError("vocab_size must leave room for the five reserved ids")

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


class Vocab:
    """Whitespace tokenizer over a lowercased vocabulary built from training text."""

    def __init__(self, tokens=()):
        self.itos = list(SPECIAL_TOKENS)
        self.stoi = {tok: i for i, tok in enumerate(self.itos)}
        for tok in tokens:
            if tok not in self.stoi:
                self.stoi[tok] = len(self.itos)
                self.itos.append(tok)

    def __len__(self):
        return len(self.itos)

    @staticmethod
    def split(text):
        return text.lower().split()

    @classmethod
    def build(cls, texts, max_size=None):
        counts = Counter(tok for text in texts for tok in cls.split(text))
        # frequency first, then alphabetical, so the build is order-independent
        ranked = sorted(counts, key=lambda tok: (-counts[tok], tok))
        if max_size is not None:
            ranked = ranked[: max(0, max_size - len(SPECIAL_TOKENS))]
        return cls(ranked)

    def ids(self, text):
        return [self.stoi.get(tok, UNK) for tok in self.split(text)]

    def encode(self, s1, s2=None):
        """Bare input ids: ``[CLS] s1 [EOS]`` or ``[CLS] s1 [SEP] s2 [EOS]``."""
        if s2 is None:
            return [CLS, *self.ids(s1), EOS]
        return [CLS, *self.ids(s1), SEP, *self.ids(s2), EOS]

    def to_dict(self):
        return {"tokens": self.itos[len(SPECIAL_TOKENS):]}

    @classmethod
    def from_dict(cls, d):
        return cls(d["tokens"])


@dataclass
class EncoderState:
    hidden: list  # N+1 tensors [B, S, d]: embedding output, then each layer's output
    cls: Tensor   # [B, d]


class Backbone:
    """Parameters and forward pass of the toy encoder.

    Parameter names follow ``backbone/...`` paths; weights act on row vectors
    (``y = x @ W + b``).
    """

    def __init__(self, config, params):
        self.config = config
        self.params = params

    @classmethod
    def init(cls, config, seed=0, dtype=np.float32):
        rng = np.random.default_rng(seed)
        d, f = config.hidden, config.ffn_inner

        def normal(shape, std):
            return Tensor(rng.normal(0.0, std, size=shape).astype(dtype), requires_grad=True)

        def const(shape, value):
            return Tensor(np.full(shape, value, dtype=dtype), requires_grad=True)

        p = {
            "backbone/embed/tokens": normal((config.vocab_size, d), config.init_std),
            "backbone/embed/positions": normal((config.max_seq, d), config.pos_init_std),
        }
        for i in range(config.num_layers):
            pre = f"backbone/layer{i}"
            for w in ("wq", "wk", "wv", "wo"):
                p[f"{pre}/attn/{w}"] = normal((d, d), 1.0 / math.sqrt(d))
                p[f"{pre}/attn/b{w[1]}"] = const((d,), 0.0)
            p[f"{pre}/ln1/gain"] = const((d,), 1.0)
            p[f"{pre}/ln1/shift"] = const((d,), 0.0)
            p[f"{pre}/ffn/w1"] = normal((d, f), 1.0 / math.sqrt(d))
            p[f"{pre}/ffn/b1"] = const((f,), 0.0)
            p[f"{pre}/ffn/w2"] = normal((f, d), 1.0 / math.sqrt(f))
            p[f"{pre}/ffn/b2"] = const((d,), 0.0)
            p[f"{pre}/ln2/gain"] = const((d,), 1.0)
            p[f"{pre}/ln2/shift"] = const((d,), 0.0)
        for name, t in p.items():
            t.name = name
        return cls(config, p)

    @property
    def dtype(self):
        return self.params["backbone/embed/tokens"].dtype

    @property
    def frozen(self):
        return not any(t.requires_grad for t in self.params.values())

    def freeze(self):
        for t in self.params.values():
            t.requires_grad = False
            t.grad = None
        return self

    def unfreeze(self):
        for t in self.params.values():
            t.requires_grad = True
        return self

    def named_parameters(self):
        return dict(self.params)

    def astype(self, dtype):
        params = {}
        for name, t in self.params.items():
            c = Tensor(t.data.astype(dtype), requires_grad=t.requires_grad, name=name)
            params[name] = c
        return Backbone(self.config, params)

    def layer_params(self, i):
        pre = f"backbone/layer{i}/"
        return {k[len(pre):]: v for k, v in self.params.items() if k.startswith(pre)}

    # -- forward -----------------------------------------------------------

    def embed(self, ids, tape):
        """Token lookup plus positional embedding for a padded id matrix [B, L]."""
        return embed(ids, self.params["backbone/embed/tokens"],
                     self.params["backbone/embed/positions"], tape)

    def run_layers(self, x, key_mask, tape, hook=None, training=False, rng=None):
        """Run every encoder layer over embedded input ``x`` [B, S, d].

        ``hook(layer_index, h)`` may rewrite the hidden sequence entering each
        layer. Returns the list of N+1 hidden sequences.
        """
        hidden = [x]
        h = x
        for i in range(self.config.num_layers):
            if hook is not None:
                h = hook(i, h)
            h = encoder_layer(h, self.layer_params(i), self.config.heads, key_mask, tape,
                              dropout_rate=self.config.dropout_rate if training else 0.0, rng=rng)
            hidden.append(h)
        return hidden

    def encode(self, batch_ids, tape=None, training=False, rng=None):
        """Encode bare token sequences; returns the EncoderState of the batch."""
        ids, key_mask = pad_batch(batch_ids, self.config.max_seq)
        if tape is None:
            tape = F.Tape(self.dtype)
        x = self.embed(ids, tape)
        hidden = self.run_layers(x, key_mask, tape, training=training, rng=rng)
        return EncoderState(hidden, hidden[-1][:, 0, :])


def pad_batch(batch_ids, max_seq):
    """Right-pad id lists with [PAD]; returns (ids [B, L], key_mask [B, L] bool)."""
    if not batch_ids:
        raise LengthError("empty batch")
    lengths = [len(x) for x in batch_ids]
    if min(lengths) == 0:
        raise LengthError("empty token sequence")
    if max(lengths) > max_seq:
        raise LengthError(f"sequence of length {max(lengths)} exceeds max_seq={max_seq}")
    L = max(lengths)
    ids = np.full((len(batch_ids), L), PAD, dtype=np.int64)
    mask = np.zeros((len(batch_ids), L), dtype=bool)
    for b, seq in enumerate(batch_ids):
        ids[b, : len(seq)] = seq
        mask[b, : len(seq)] = True
    return ids, mask


def embed(ids, table, positions, tape):
    ids = np.asarray(ids, dtype=np.int64)
    squeeze = ids.ndim == 1
    if squeeze:
        ids = ids[None, :]
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise VocabError(f"token id out of range [0, {table.shape[0]})")
    L = ids.shape[1]
    if L > positions.shape[0]:
        raise LengthError(f"sequence of length {L} exceeds max_seq={positions.shape[0]}")
    tok = F.getitem(table, ids, tape=tape)
    pos = F.getitem(positions, slice(0, L), tape=tape)
    out = F.add(tok, pos, tape=tape)
    return out[0] if squeeze else out


def attention_mask_bias(key_mask, dtype):
    """Additive bias [B, 1, 1, S] that removes padded keys from attention."""
    bias = np.where(key_mask, 0.0, MASK_VALUE).astype(dtype)
    return Tensor(bias[:, None, None, :], dtype=dtype)


def multi_head_attention(h, p, heads, key_mask, tape, return_probs=False):
    B, S, d = h.shape
    dh = d // heads

    def split(t):
        return F.transpose(F.reshape(t, (B, S, heads, dh)), (0, 2, 1, 3))

    q = split(F.add(F.matmul(h, p["attn/wq"]), p["attn/bq"]))
    k = split(F.add(F.matmul(h, p["attn/wk"]), p["attn/bk"]))
    v = split(F.add(F.matmul(h, p["attn/wv"]), p["attn/bv"]))
    scores = F.scale(F.matmul(q, F.swapaxes(k, -1, -2)), 1.0 / math.sqrt(dh))
    if key_mask is not None:
        scores = F.add(scores, attention_mask_bias(key_mask, h.dtype))
    probs = F.softmax(scores, axis=-1)
    ctx = F.reshape(F.transpose(F.matmul(probs, v), (0, 2, 1, 3)), (B, S, d))
    out = F.add(F.matmul(ctx, p["attn/wo"]), p["attn/bo"])
    return (out, probs) if return_probs else out


def encoder_layer(h, p, heads, key_mask=None, tape=None, dropout_rate=0.0, rng=None):
    """Post-norm block: LN(h + MHA(h)), then LN(. + FFN(.))."""
    if h.ndim == 2:
        h = F.reshape(h, (1,) + h.shape)
        km = None if key_mask is None else np.asarray(key_mask)[None, :]
        return F.reshape(encoder_layer(h, p, heads, km, tape, dropout_rate, rng), h.shape[1:])
    if h.shape[1] == 0:
        raise DimensionError("encoder_layer on an empty sequence")
    d = p["ln1/gain"].shape[0]
    if h.shape[-1] != d:
        raise DimensionError(f"hidden size {h.shape[-1]} does not match layer width {d}")
    a = multi_head_attention(h, p, heads, key_mask, tape)
    a = F.dropout(a, dropout_rate, rng, training=dropout_rate > 0)
    h = F.layer_norm(F.add(h, a), p["ln1/gain"], p["ln1/shift"])
    f = F.gelu(F.add(F.matmul(h, p["ffn/w1"]), p["ffn/b1"]))
    f = F.add(F.matmul(f, p["ffn/w2"]), p["ffn/b2"])
    f = F.dropout(f, dropout_rate, rng, training=dropout_rate > 0)
    return F.layer_norm(F.add(h, f), p["ln2/gain"], p["ln2/shift"])


@dataclass
class ClassifierHead:
    weight: Tensor  # [num_labels, d]
    bias: Tensor    # [num_labels]
    mode: str = "classification"

    def __post_init__(self):
        if self.mode not in ("classification", "regression"):
            raise ConfigError(f"unknown head mode {self.mode!r}")
        if self.mode == "regression" and self.weight.shape[0] != 1:
            raise ConfigError("regression head must have exactly one output")

    @classmethod
    def init(cls, d, num_labels=2, mode="classification", seed=0, dtype=np.float32):
        if mode == "regression":
            num_labels = 1
        rng = np.random.default_rng(seed)
        bound = 1.0 / math.sqrt(d)
        w = Tensor(rng.uniform(-bound, bound, size=(num_labels, d)).astype(dtype),
                   requires_grad=True, name="head/weight")
        b = Tensor(np.zeros(num_labels, dtype=dtype), requires_grad=True, name="head/bias")
        return cls(w, b, mode)

    @property
    def num_labels(self):
        return self.weight.shape[0]

    def named_parameters(self):
        return {"head/weight": self.weight, "head/bias": self.bias}

    def astype(self, dtype):
        w = Tensor(self.weight.data.astype(dtype), requires_grad=self.weight.requires_grad,
                   name="head/weight")
        b = Tensor(self.bias.data.astype(dtype), requires_grad=self.bias.requires_grad,
                   name="head/bias")
        return ClassifierHead(w, b, self.mode)


def classify(h_cls, head, tape=None):
    """Log-probabilities (classification) or a raw score (regression)."""
    if tape is None:
        tape = h_cls.tape
    logits = F.add(F.matmul(h_cls, F.transpose(head.weight, tape=tape), tape=tape), head.bias,
                   tape=tape)
    if head.mode == "regression":
        return logits[..., 0]
    return F.log_softmax(logits, axis=-1)


def cross_entropy(log_probs, labels):
    """Mean negative log-likelihood of integer labels under [B, C] log-probabilities."""
    labels = np.asarray(labels, dtype=np.int64)
    picked = log_probs[np.arange(len(labels)), labels]
    return F.scale(F.mean(picked), -1.0)


def mse(preds, targets):
    diff = F.sub(preds, Tensor(np.asarray(targets, dtype=preds.dtype)))
    return F.mean(F.mul(diff, diff))
