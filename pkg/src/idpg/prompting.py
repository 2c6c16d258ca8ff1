"""Prompt insertion into the backbone's input and the full IDPG forward pass."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as F
from .encoders import RepCache, encode_bag_of_vectors, sentence_tokens
from .errors import ConfigError, LengthError
from .nn import CLS, EOS, SEP, classify, pad_batch
from .tensor import Tensor

SINGLE_POSITIONS = (0, 1, 4)
PAIR_POSITIONS = (0, 1, 2, 3, 4)


@dataclass(frozen=True)
class Layout:
    """Where each bare token and each prompt row lands in the spliced sequence."""

    token_slots: tuple
    prompt_slots: tuple

    @property
    def length(self):
        return len(self.token_slots) + len(self.prompt_slots)


def _segments(ids):
    """(len(S1), len(S2) or None) for ``[CLS] S1 [EOS]`` / ``[CLS] S1 [SEP] S2 [EOS]``."""
    ids = list(ids)
    if len(ids) < 2 or ids[0] != CLS or ids[-1] != EOS:
        raise LengthError("token ids must start with [CLS] and end with [EOS]")
    if SEP in ids:
        sep = ids.index(SEP)
        return sep - 1, len(ids) - sep - 2
    return len(ids) - 2, None


def insertion_index(ids, position):
    """Index in the bare sequence before which the prompt is inserted."""
    a, b = _segments(ids)
    allowed = SINGLE_POSITIONS if b is None else PAIR_POSITIONS
    if position not in allowed:
        kind = "single-sentence" if b is None else "sentence-pair"
        raise ConfigError(f"position {position} is not valid for {kind} input; use {allowed}")
    if position == 0:
        return 1
    if position == 1:
        return 1 + a
    if position == 2:
        return a + 2
    if position == 3:
        return a + 2 + b
    return len(ids)


def prompt_layout(ids, t, position):
    k = insertion_index(ids, position)
    L = len(ids)
    tokens = tuple(j if j < k else j + t for j in range(L))
    return Layout(tokens, tuple(range(k, k + t)))


def _placement(layouts, L, t):
    """One-hot placement tensors Q [B, S, L] (tokens) and P [B, S, t] (prompts)."""
    S = max(lay.length for lay in layouts)
    B = len(layouts)
    Q = np.zeros((B, S, L))
    P = np.zeros((B, S, max(t, 1)))
    mask = np.zeros((B, S), dtype=bool)
    for b, lay in enumerate(layouts):
        for j, s in enumerate(lay.token_slots):
            Q[b, s, j] = 1.0
        for j, s in enumerate(lay.prompt_slots):
            P[b, s, j] = 1.0
        mask[b, : lay.length] = True
    return Q, P, mask


@dataclass
class Assembled:
    x: Tensor              # [B, S, d]
    key_mask: np.ndarray   # [B, S]
    slot_mask: np.ndarray  # [B, S] True at prompt rows
    placement: np.ndarray  # P [B, S, t]


def assemble_batch(batch_ids, prompt, position, backbone, tape):
    """Embed bare inputs and splice prompt rows [B, t, d] at ``position``.

    Positional embeddings are added to real tokens only; prompt rows enter
    as generated.
    """
    t = 0 if prompt is None else prompt.shape[-2]
    layouts = [prompt_layout(ids, t, position) for ids in batch_ids]
    ids, _ = pad_batch(batch_ids, backbone.config.max_seq)
    emb = backbone.embed(ids, tape)
    Q, P, mask = _placement(layouts, ids.shape[1], t)
    dtype = backbone.dtype
    x = F.matmul(Tensor(Q.astype(dtype)), emb, tape=tape)
    slot = P[..., :t].sum(axis=-1) > 0
    if t:
        x = F.add(x, F.matmul(Tensor(P.astype(dtype)), prompt, tape=tape), tape=tape)
    return Assembled(x, mask, slot, P[..., :t])


def assemble_input(ids, prompt, position, backbone, tape=None):
    """Single-sequence splice: [len(ids) + t, d]."""
    if tape is None:
        tape = F.Tape(backbone.dtype)
    if prompt is not None and prompt.ndim == 2:
        prompt = F.reshape(prompt, (1,) + prompt.shape, tape=tape)
    out = assemble_batch([list(ids)], prompt, position, backbone, tape)
    return out.x[0]


def overwrite_slots(h, prompt, assembled, tape):
    """Replace the prompt rows of hidden sequence ``h`` with fresh prompts."""
    dtype = h.dtype
    keep = Tensor((~assembled.slot_mask)[..., None].astype(dtype))
    placed = F.matmul(Tensor(assembled.placement.astype(dtype)), prompt, tape=tape)
    return F.add(F.mul(h, keep, tape=tape), placed, tape=tape)


class IDPGModel:
    """Frozen backbone + prompt source (generator or static prompts) + head.

    ``prompts`` may be None for the vanilla backbone+head model.
    """

    def __init__(self, backbone, prompts, head, position=0, embedding_table=None,
                 cache=None):
        self.backbone = backbone
        self.prompts = prompts
        self.head = head
        self.position = position
        self.embedding_table = embedding_table
        self.cache = cache if cache is not None else RepCache()
        cfg = getattr(prompts, "config", None)
        if cfg is not None and cfg.encoder == "bag_of_vectors" and embedding_table is None:
            raise ConfigError("bag_of_vectors encoder needs an embedding table")

    @property
    def dtype(self):
        return self.backbone.dtype

    @property
    def generator_config(self):
        return getattr(self.prompts, "config", None)

    @property
    def multi(self):
        if self.prompts is None:
            return False
        cfg = self.generator_config
        if cfg is not None:
            return cfg.multi
        return self.prompts.deep

    def trainable_parameters(self, include_head=True):
        """Parameters with requires_grad, each once, in a stable order."""
        named = {}
        named.update(self.backbone.named_parameters())
        if self.prompts is not None:
            named.update(self.prompts.named_parameters())
        if include_head:
            named.update(self.head.named_parameters())
        seen, out = set(), {}
        for name, t in named.items():
            if t.requires_grad and id(t) not in seen:
                seen.add(id(t))
                out[name] = t
        return out

    # -- sentence representations -------------------------------------------

    def sentence_rep(self, ids, text=None, key=None):
        """M(x): bare-input h_CLS or mean word vector; cached under ``key``."""
        if key is not None and key in self.cache:
            return self.cache.get(key)
        cfg = self.generator_config
        if cfg is not None and cfg.encoder == "bag_of_vectors":
            if text is None:
                raise ConfigError("bag_of_vectors encoder needs the example text")
            rep = encode_bag_of_vectors(sentence_tokens(*text), self.embedding_table)
        else:
            rep = self.backbone.encode([list(ids)]).cls.data[0]
        if key is not None:
            rep = self.cache.put(key, rep)
        return rep

    def reps(self, batch_ids, texts=None, keys=None):
        out = []
        for i, ids in enumerate(batch_ids):
            text = texts[i] if texts is not None else None
            key = keys[i] if keys is not None else None
            out.append(self.sentence_rep(ids, text, key))
        return np.stack(out).astype(self.dtype)

    # -- forward --------------------------------------------------------------

    def hidden_cls(self, batch_ids, tape, reps=None, texts=None, keys=None, training=False,
                   rng=None):
        backbone = self.backbone
        if self.prompts is None:
            return backbone.encode(batch_ids, tape, training, rng).cls
        if reps is None:
            reps = self.reps(batch_ids, texts, keys)
        rep = tape.tensor(reps)
        prompt0 = self.prompts.generate(rep, 0, tape)
        asm = assemble_batch(batch_ids, prompt0, self.position, backbone, tape)
        hook = None
        if self.multi:
            cfg = self.generator_config
            from_previous = cfg is not None and cfg.input_source == "previous_layer"

            def hook(layer, h):
                if layer == 0:
                    return h
                src = h[:, 0, :] if from_previous else rep
                return overwrite_slots(h, self.prompts.generate(src, layer, tape), asm, tape)

        hidden = backbone.run_layers(asm.x, asm.key_mask, tape, hook, training, rng)
        return hidden[-1][:, 0, :]

    def forward(self, batch_ids, tape=None, reps=None, texts=None, keys=None, training=False,
                rng=None):
        """Log-probabilities [B, C] (or scores [B] for regression) of a batch."""
        if tape is None:
            tape = F.Tape(self.dtype)
        h = self.hidden_cls(batch_ids, tape, reps, texts, keys, training, rng)
        return classify(h, self.head, tape)


def forward_idpg(model, batch_ids, tape=None, **kwargs):
    return model.forward(batch_ids, tape, **kwargs)
