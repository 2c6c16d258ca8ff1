"""Finite-difference gradient checks for the differentiable pieces.

Each case builds a scalar loss from a handful of 64-bit leaf tensors. The
analytic gradient from the tape is compared against central differences
with step ``h``; the error of one tensor is

    ||g_analytic - g_numeric|| / max(||g_analytic||, ||g_numeric||, GRAD_FLOOR)

so it stays meaningful when individual entries are near zero. The floor
covers tensors whose true gradient is identically zero (an attention key
bias, for one), where both sides are pure rounding noise.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as F
from .generator import ARCH_VARIANTS, GeneratorConfig, PromptGenerator
from .nn import (Backbone, ClassifierHead, TransformerConfig, classify, cross_entropy,
                 encoder_layer, mse, multi_head_attention)
from .phm import PhmLinear
from .prompting import IDPGModel
from .tensor import Tensor

STEP = 1e-5
TOLERANCE = 1e-4
GRAD_FLOOR = 1e-4  # a vanishing gradient passes when ||diff|| <= 1e-8
SEEDS = tuple(range(20))


@dataclass
class GradResult:
    case: str
    seed: int
    param: str
    rel_error: float

    @property
    def ok(self):
        return self.rel_error <= TOLERANCE


def rel_error(analytic, numeric):
    a, n = np.ravel(analytic), np.ravel(numeric)
    scale = max(np.linalg.norm(a), np.linalg.norm(n), GRAD_FLOOR)
    return float(np.linalg.norm(a - n) / scale)


def numeric_grad(loss_fn, t, h=STEP):
    g = np.zeros_like(t.data)
    flat, gflat = t.data.reshape(-1), g.reshape(-1)
    for i in range(flat.size):
        keep = flat[i]
        flat[i] = keep + h
        up = loss_fn(F.Tape(np.float64)).item()
        flat[i] = keep - h
        down = loss_fn(F.Tape(np.float64)).item()
        flat[i] = keep
        gflat[i] = (up - down) / (2 * h)
    return g


def check(loss_fn, params, h=STEP):
    """Per-tensor relative errors for ``loss_fn(tape) -> scalar`` over ``params``."""
    for p in params.values():
        p.grad = None
    tape = F.Tape(np.float64)
    tape.backward(loss_fn(tape))
    out = {}
    for name, p in params.items():
        analytic = p.grad if p.grad is not None else np.zeros_like(p.data)
        out[name] = rel_error(analytic, numeric_grad(loss_fn, p, h))
    return out


# -- cases ------------------------------------------------------------------
# Each case takes an rng and returns (loss_fn, params).


def _leaf(rng, *shape, lo=None, name=None):
    x = rng.normal(size=shape)
    if lo is not None:
        x = np.abs(x) + lo
    return Tensor(x, requires_grad=True, name=name)


def _away_from_zero(rng, *shape):
    x = rng.normal(size=shape)
    return Tensor(x + 0.1 * np.sign(x), requires_grad=True)


def _weighted(out, w, tape):
    return F.sum(F.mul(out, Tensor(w), tape=tape), tape=tape)


def case_elementwise(rng):
    x, y = _leaf(rng, 3, 4), _leaf(rng, 3, 4)
    p, r = _leaf(rng, 3, 4, lo=0.5), _away_from_zero(rng, 3, 4)
    w = rng.normal(size=(3, 4))

    def loss(tape):
        a = F.add(F.tanh(x, tape=tape), F.mul(x, y, tape=tape), tape=tape)
        a = F.sub(a, F.scale(F.exp(y, tape=tape), 0.3, tape=tape), tape=tape)
        a = F.add(a, F.log(p, tape=tape), tape=tape)
        a = F.add(a, F.gelu(x, tape=tape), tape=tape)
        a = F.add(a, F.relu(r, tape=tape), tape=tape)
        return _weighted(a, w, tape)

    return loss, {"x": x, "y": y, "p": p, "r": r}


def case_broadcast(rng):
    x, b = _leaf(rng, 2, 3, 4), _leaf(rng, 4)
    w = rng.normal(size=(2, 3, 4))
    return (lambda tape: _weighted(F.mul(F.add(x, b, tape=tape), x, tape=tape), w, tape)), \
        {"x": x, "b": b}


def case_matmul_kron(rng):
    a, b = _leaf(rng, 2, 3, 4), _leaf(rng, 4, 5)
    u, v = _leaf(rng, 2, 2), _leaf(rng, 3, 2)
    w1, w2 = rng.normal(size=(2, 3, 5)), rng.normal(size=(6, 4))

    def loss(tape):
        return F.add(_weighted(F.matmul(a, b, tape=tape), w1, tape),
                     _weighted(F.kron(u, v, tape=tape), w2, tape), tape=tape)

    return loss, {"a": a, "b": b, "u": u, "v": v}


def case_softmax(rng):
    x = _leaf(rng, 3, 5)
    w1, w2 = rng.normal(size=(3, 5)), rng.normal(size=(3, 5))

    def loss(tape):
        return F.add(_weighted(F.softmax(x, tape=tape), w1, tape),
                     _weighted(F.log_softmax(x, tape=tape), w2, tape), tape=tape)

    return loss, {"x": x}


def case_shape_ops(rng):
    x, y = _leaf(rng, 2, 3, 4), _leaf(rng, 2, 3, 4)
    w = rng.normal(size=(4, 3, 4))

    def loss(tape):
        s = F.stack([F.getitem(x, 0, tape=tape), F.getitem(y, 1, tape=tape)], axis=0, tape=tape)
        c = F.concat([F.swapaxes(s, 1, 2, tape=tape), F.transpose(x, (0, 2, 1), tape=tape)],
                     axis=0, tape=tape)
        c = F.reshape(F.reshape(c, (-1,), tape=tape), (4, 4, 3), tape=tape)
        return F.add(_weighted(F.transpose(c, (0, 2, 1), tape=tape), w, tape),
                     F.mean(F.mul(y, y, tape=tape), tape=tape), tape=tape)

    return loss, {"x": x, "y": y}


def case_layer_norm(rng):
    x, gain, shift = _leaf(rng, 3, 6), _leaf(rng, 6), _leaf(rng, 6)
    w = rng.normal(size=(3, 6))
    return (lambda tape: _weighted(F.layer_norm(x, gain, shift, tape=tape), w, tape)), \
        {"x": x, "gain": gain, "shift": shift}


def _toy_layer(rng, d=8, f=12):
    p = {}
    for w in ("wq", "wk", "wv", "wo"):
        p[f"attn/{w}"] = Tensor(rng.normal(0, 0.4, size=(d, d)), requires_grad=True)
        p[f"attn/b{w[1]}"] = _leaf(rng, d)
    for ln in ("ln1", "ln2"):
        p[f"{ln}/gain"] = _leaf(rng, d)
        p[f"{ln}/shift"] = _leaf(rng, d)
    p["ffn/w1"] = Tensor(rng.normal(0, 0.4, size=(d, f)), requires_grad=True)
    p["ffn/b1"] = _leaf(rng, f)
    p["ffn/w2"] = Tensor(rng.normal(0, 0.4, size=(f, d)), requires_grad=True)
    p["ffn/b2"] = _leaf(rng, d)
    return p


def case_attention(rng):
    p = _toy_layer(rng)
    h = _leaf(rng, 2, 4, 8)
    mask = np.array([[True] * 4, [True, True, True, False]])
    w = rng.normal(size=(2, 4, 8))
    params = {k: v for k, v in p.items() if k.startswith("attn/")}
    params["h"] = h
    return (lambda tape: _weighted(multi_head_attention(F.add(tape.tensor(0.0), h), p, 2, mask,
                                                        tape), w, tape)), params


def case_encoder_layer(rng):
    p = _toy_layer(rng)
    h = _leaf(rng, 2, 3, 8)
    w = rng.normal(size=(2, 3, 8))
    params = dict(p, h=h)
    return (lambda tape: _weighted(encoder_layer(F.add(tape.tensor(np.zeros(8)), h), p, 2, None,
                                                 tape), w, tape)), params


def case_classifier_loss(rng):
    h = _leaf(rng, 5, 6)
    head = ClassifierHead(_leaf(rng, 3, 6), _leaf(rng, 3))
    reg = ClassifierHead(_leaf(rng, 1, 6), _leaf(rng, 1), "regression")
    labels = rng.integers(0, 3, size=5)
    targets = rng.normal(size=5)

    def loss(tape):
        hh = F.add(tape.tensor(np.zeros(6)), h)
        ce = cross_entropy(classify(hh, head, tape), labels)
        return F.add(ce, mse(classify(hh, reg, tape), targets), tape=tape)

    return loss, {"h": h, "W": head.weight, "b": head.bias, "w_reg": reg.weight,
                  "b_reg": reg.bias}


def case_phm_layer(rng):
    n = int(rng.choice([1, 2, 4]))
    layer = PhmLinear.init(4 * n, 2 * n, n, rng, num_biases=2, dtype=np.float64)
    for b in layer.biases:
        b.data[...] = rng.normal(size=b.shape)
    x = _leaf(rng, 3, layer.in_dim)
    w = rng.normal(size=(3, layer.out_dim))

    def loss(tape):
        y1 = layer.forward(F.add(tape.tensor(0.0), x), 1, tape, path="materialize")
        y2 = layer.forward(F.add(tape.tensor(0.0), x), 0, tape, path="blocks")
        return _weighted(F.add(y1, y2, tape=tape), w, tape)

    params = dict(layer.named_parameters())
    params["x"] = x
    return loss, params


def _randomize(params, rng):
    for p in params.values():
        p.data[...] = rng.normal(0, 0.5, size=p.shape)


def _generator_case(flavor, variant, sharing):
    def case(rng):
        cfg = GeneratorConfig(flavor=flavor, t=2, m=4, d=4, n=2, depth_mode="multi",
                              num_layers=2, sharing=sharing, input_source="layer0",
                              enc_dim=6 if variant.startswith("residual") else 4,
                              arch_variant=variant)
        g = PromptGenerator.init(cfg, seed=int(rng.integers(1 << 30)), dtype=np.float64)
        params = g.named_parameters()
        _randomize(params, rng)
        rep = _leaf(rng, 2, cfg.enc_dim)
        w = [rng.normal(size=(2, cfg.t, cfg.d)) for _ in range(cfg.num_layers)]

        def loss(tape):
            r = F.add(tape.tensor(0.0), rep)
            terms = [_weighted(g.generate(r, i, tape), w[i], tape) for i in range(cfg.num_layers)]
            return F.add(terms[0], terms[1], tape=tape)

        return loss, dict(params, rep=rep)

    return case


def case_idpg_forward(rng):
    """Full forward + loss through a tiny frozen backbone with an M-IDPG-PHM generator."""
    tcfg = TransformerConfig(num_layers=2, hidden=4, heads=2, ffn_inner=6, vocab_size=12,
                             max_seq=16)
    bb = Backbone.init(tcfg, seed=int(rng.integers(1 << 30)), dtype=np.float64).freeze()
    gcfg = GeneratorConfig(flavor="phm", t=2, m=4, d=4, n=2, sharing="M",
                           input_source="previous_layer")
    g = PromptGenerator.init(gcfg, seed=int(rng.integers(1 << 30)), dtype=np.float64)
    _randomize(g.named_parameters(), rng)
    head = ClassifierHead.init(4, 2, seed=int(rng.integers(1 << 30)), dtype=np.float64)
    model = IDPGModel(bb, g, head, position=1)
    batch = [[0, 5, 6, 3], [0, 7, 2, 8, 9, 3]]
    labels = np.array([0, 1])
    reps = model.reps(batch)

    def loss(tape):
        return cross_entropy(model.forward(batch, tape, reps=reps), labels)

    return loss, model.trainable_parameters()


CASES = {
    "elementwise": case_elementwise,
    "broadcast": case_broadcast,
    "matmul-kron": case_matmul_kron,
    "softmax": case_softmax,
    "shape-ops": case_shape_ops,
    "layer-norm": case_layer_norm,
    "attention": case_attention,
    "encoder-layer": case_encoder_layer,
    "classifier-loss": case_classifier_loss,
    "phm-layer": case_phm_layer,
    "idpg-forward": case_idpg_forward,
}
for _flavor in ("dnn", "phm"):
    for _variant in ARCH_VARIANTS:
        CASES[f"{_flavor}-generator-{_variant}"] = _generator_case(_flavor, _variant, "M")
    for _sharing in ("S", "L"):
        CASES[f"{_flavor}-generator-{_sharing}"] = _generator_case(_flavor, "plain", _sharing)


def run_suite(seeds=SEEDS, cases=None, h=STEP):
    """Every case under every seed; returns a flat list of GradResult."""
    names = list(CASES) if cases is None else list(cases)
    results = []
    for seed in seeds:
        for name in names:
            rng = np.random.default_rng([seed, sorted(CASES).index(name)])
            loss_fn, params = CASES[name](rng)
            for param, err in check(loss_fn, params, h).items():
                results.append(GradResult(name, seed, param, err))
    return results


def worst(results):
    return max(results, key=lambda r: r.rel_error)
