import math

import numpy as np
import pytest

from idpg import tensor as F
from idpg.errors import ConfigError, DimensionError, LengthError, VocabError
from idpg.nn import (CLS, EOS, PAD, SEP, Backbone, ClassifierHead, TransformerConfig, Vocab,
                     classify, cross_entropy, embed, encoder_layer, multi_head_attention,
                     pad_batch)
from idpg.tensor import Tape, Tensor


def small(num_layers=2, hidden=8, heads=2, **kw):
    return TransformerConfig(num_layers=num_layers, hidden=hidden, heads=heads, ffn_inner=16,
                             vocab_size=20, max_seq=12, **kw)


# -- embedding ----------------------------------------------------------------


def test_embed_lookup_plus_positions():
    table = Tensor([[1.0, 0.0], [0.0, 1.0], [1.0, 1.0]])
    pos = Tensor(np.zeros((4, 2)))
    out = embed([2, 0], table, pos, Tape(np.float64))
    np.testing.assert_array_equal(out.data, [[1, 1], [1, 0]])


def test_embed_adds_position_rows():
    table = Tensor([[1.0, 0.0], [0.0, 1.0]])
    pos = Tensor([[0.5, 0.5], [-1.0, 2.0], [9.0, 9.0]])
    out = embed([1, 1], table, pos, Tape(np.float64))
    np.testing.assert_array_equal(out.data, [[0.5, 1.5], [-1.0, 3.0]])


def test_embed_out_of_range_id():
    table = Tensor(np.ones((3, 2)))
    with pytest.raises(VocabError):
        embed([3], table, Tensor(np.zeros((4, 2))), Tape(np.float64))
    with pytest.raises(VocabError):
        embed([-1], table, Tensor(np.zeros((4, 2))), Tape(np.float64))


def test_embed_too_long():
    with pytest.raises(LengthError):
        embed([0] * 5, Tensor(np.ones((3, 2))), Tensor(np.zeros((4, 2))), Tape(np.float64))


# -- vocab / padding ----------------------------------------------------------


def test_vocab_encode_layouts():
    v = Vocab(["a", "b"])
    a, b = v.stoi["a"], v.stoi["b"]
    assert v.encode("a b") == [CLS, a, b, EOS]
    assert v.encode("A", "b") == [CLS, a, SEP, b, EOS]
    assert v.ids("zzz") == [1]


def test_vocab_build_is_order_independent():
    assert Vocab.build(["x y y", "z"]).itos == Vocab.build(["z", "y x y"]).itos


def test_pad_batch():
    ids, mask = pad_batch([[0, 5, 3], [0, 3]], max_seq=8)
    assert ids.tolist() == [[0, 5, 3], [0, 3, PAD]]
    assert mask.tolist() == [[True] * 3, [True, True, False]]
    with pytest.raises(LengthError):
        pad_batch([[0] * 9], max_seq=8)
    with pytest.raises(LengthError):
        pad_batch([[]], max_seq=8)


def test_config_rejects_indivisible_heads():
    with pytest.raises(ConfigError):
        TransformerConfig(hidden=10, heads=3)


# -- attention / layers -------------------------------------------------------


def test_attention_rows_sum_to_one():
    bb = Backbone.init(small(), seed=1, dtype=np.float64)
    h = Tensor(np.random.default_rng(0).normal(size=(2, 5, 8)))
    mask = np.array([[True] * 5, [True] * 3 + [False] * 2])
    _, probs = multi_head_attention(h, bb.layer_params(0), 2, mask, None, return_probs=True)
    np.testing.assert_allclose(probs.data.sum(-1), 1.0, atol=1e-12)
    # padded keys receive no weight
    assert np.all(probs.data[1, :, :, 3:] < 1e-300)


def test_single_token_layer():
    bb = Backbone.init(small(), seed=2, dtype=np.float64)
    h = Tensor(np.random.default_rng(1).normal(size=(1, 8)))
    out = encoder_layer(h, bb.layer_params(0), 2)
    assert out.shape == (1, 8) and np.all(np.isfinite(out.data))


def test_layer_width_mismatch():
    bb = Backbone.init(small(), seed=2, dtype=np.float64)
    with pytest.raises(DimensionError):
        encoder_layer(Tensor(np.ones((1, 3, 4))), bb.layer_params(0), 2)


def _ln(x, g, b, eps=1e-5):
    mu = x.mean(-1, keepdims=True)
    var = ((x - mu) ** 2).mean(-1, keepdims=True)
    return (x - mu) / np.sqrt(var + eps) * g + b


def _gelu(x):
    return 0.5 * x * (1.0 + np.vectorize(math.erf)(x / math.sqrt(2.0)))


def _reference_encoder(p, ids, cfg):
    """Loop-based single-sequence encoder written independently of the library."""
    x = p["backbone/embed/tokens"][ids] + p["backbone/embed/positions"][: len(ids)]
    dh = cfg.hidden // cfg.heads
    for i in range(cfg.num_layers):
        w = {k.split(f"layer{i}/")[1]: v for k, v in p.items() if f"layer{i}/" in k}
        q = x @ w["attn/wq"] + w["attn/bq"]
        k = x @ w["attn/wk"] + w["attn/bk"]
        v = x @ w["attn/wv"] + w["attn/bv"]
        ctx = np.zeros_like(x)
        for hd in range(cfg.heads):
            sl = slice(hd * dh, (hd + 1) * dh)
            for r in range(len(ids)):
                s = np.array([q[r, sl] @ k[c, sl] for c in range(len(ids))]) / math.sqrt(dh)
                e = np.exp(s - s.max())
                a = e / e.sum()
                ctx[r, sl] = sum(a[c] * v[c, sl] for c in range(len(ids)))
        x = _ln(x + ctx @ w["attn/wo"] + w["attn/bo"], w["ln1/gain"], w["ln1/shift"])
        f = _gelu(x @ w["ffn/w1"] + w["ffn/b1"]) @ w["ffn/w2"] + w["ffn/b2"]
        x = _ln(x + f, w["ln2/gain"], w["ln2/shift"])
    return x


def test_encoder_matches_reference_implementation():
    cfg = small()
    bb = Backbone.init(cfg, seed=3, dtype=np.float64)
    # nonzero biases and norms so every parameter matters
    rng = np.random.default_rng(9)
    for t in bb.params.values():
        if t.data.ndim == 1:
            t.data[:] = rng.normal(size=t.shape) * 0.3 + (1.0 if "gain" in t.name else 0.0)
    ids = [CLS, 7, 9, 11, EOS]
    got = bb.encode([ids]).hidden[-1].data[0]
    want = _reference_encoder({k: v.data for k, v in bb.params.items()}, ids, cfg)
    assert np.max(np.abs(got - want)) <= 1e-10


def test_permutation_changes_cls():
    bb = Backbone.init(small(), seed=4, dtype=np.float64)
    a = bb.encode([[CLS, 5, 6, 7, EOS]]).cls.data
    b = bb.encode([[CLS, 7, 6, 5, EOS]]).cls.data
    assert np.max(np.abs(a - b)) > 1e-6


def test_padding_does_not_leak():
    bb = Backbone.init(small(), seed=5, dtype=np.float64)
    seqs = [[CLS, 5, 6, EOS], [CLS, 8, 9, 10, 11, EOS], [CLS, EOS]]
    batched = bb.encode(seqs).cls.data
    single = np.concatenate([bb.encode([s]).cls.data for s in seqs])
    assert np.max(np.abs(batched - single)) <= 1e-12


def test_dropout_off_in_eval():
    bb = Backbone.init(small(dropout_rate=0.5), seed=6, dtype=np.float64)
    ids = [[CLS, 5, 6, EOS]]
    a = bb.encode(ids).cls.data
    b = bb.encode(ids, training=False).cls.data
    c = bb.encode(ids, training=True, rng=np.random.default_rng(0)).cls.data
    np.testing.assert_array_equal(a, b)
    assert np.max(np.abs(a - c)) > 0


def test_encode_is_deterministic():
    cfg = small()
    a = Backbone.init(cfg, seed=7).encode([[CLS, 5, EOS]]).cls.data
    b = Backbone.init(cfg, seed=7).encode([[CLS, 5, EOS]]).cls.data
    assert a.tobytes() == b.tobytes()


# -- head / losses ------------------------------------------------------------


def test_zero_head_gives_uniform():
    head = ClassifierHead.init(8, 3, dtype=np.float64)
    head.weight.data[:] = 0.0
    out = classify(Tensor(np.random.default_rng(0).normal(size=(2, 8))), head)
    np.testing.assert_allclose(out.data, math.log(1 / 3), atol=1e-15)


def test_regression_head_is_projection():
    head = ClassifierHead.init(3, mode="regression", dtype=np.float64)
    head.weight.data[:] = [[1.0, 2.0, 3.0]]
    head.bias.data[:] = 0.5
    out = classify(Tensor([[1.0, 1.0, 1.0], [0.0, 0.0, 2.0]]), head)
    assert out.data.tolist() == [6.5, 6.5]


def test_regression_head_needs_one_output():
    with pytest.raises(ConfigError):
        ClassifierHead(Tensor(np.ones((2, 3))), Tensor(np.zeros(2)), "regression")


def test_cross_entropy_gradient_is_softmax_minus_onehot():
    logits = Tensor(np.array([[0.2, -1.0, 0.5], [1.0, 1.0, 1.0]]), requires_grad=True)
    tape = Tape(np.float64)
    loss = cross_entropy(F.log_softmax(F.add(tape.tensor(0.0), logits)), [2, 0])
    tape.backward(loss)
    x = logits.data
    p = np.exp(x) / np.exp(x).sum(1, keepdims=True)
    onehot = np.eye(3)[[2, 0]]
    np.testing.assert_allclose(logits.grad, (p - onehot) / 2, atol=1e-14)
    assert loss.item() == pytest.approx(-np.mean(np.log(p[[0, 1], [2, 0]])), abs=1e-14)


def test_frozen_backbone_reports_frozen():
    bb = Backbone.init(small(), seed=0).freeze()
    assert bb.frozen and all(t.grad is None for t in bb.params.values())
