"""The nine acceptance criteria, each at its stated tolerance and time budget.

A PASS/FAIL line per criterion is printed in the pytest terminal summary.
"""

import time

import numpy as np
import pytest

from conftest import criterion
from idpg import accountant as acc
from idpg import gradcheck
from idpg.analysis import PairScore, analyze, similarity_pairs, topk_distribution
from idpg.checkpoint import load_model, save_model
from idpg.cli import main, phm_oracle
from idpg.encoders import EmbeddingTable
from idpg.generator import GeneratorConfig, PromptGenerator, StaticPrompt, generator_param_count
from idpg.nn import CLS, EOS, SEP, Backbone, ClassifierHead, TransformerConfig, Vocab
from idpg.prompting import IDPGModel
from idpg.run import RunConfig, build, execute, final_metrics
from idpg.tensor import Tensor
from idpg.trainer import TrainConfig

# -- 1. parameter table -------------------------------------------------------

TABLE = {
    "full-finetune": "355M", "adapter": "1.55M", "compacter": "149.25K",
    "prompt-tuning": "5K", "prompt-tuning-134": "134K", "p-tuning-v2": "120K",
    "s-idpg-phm": "105K", "s-idpg-dnn": "1.5M", "m-idpg-phm-glove": "141K",
    "m-idpg-phm": "134K", "m-idpg-dnn": "216K",
}
COMPONENTS = {
    "m-idpg-phm": {"W1": (1_040, "1K"), "W2": (128_000, "125K"), "shared A": (8_192, "8K")},
    "s-idpg-phm": {"W1": (16_640, "16.25K"), "W2": (87_040, "85K"), "shared A": (4_096, "4K")},
    "m-idpg-phm-glove": {"W1": (1_216, "1216"), "W2": (143_360, "140K"),
                         "shared A": (128, "128")},
}


def test_criterion_1_parameter_table(capsys):
    with criterion(1, "parameter-table reproduction"):
        start = time.perf_counter()
        assert main(["count-params", "--format", "record"]) == 0
        import json
        records = {r["method"]: r for r in json.loads(capsys.readouterr().out)}
        elapsed = time.perf_counter() - start
        assert {m: r["display"] for m, r in records.items()} == TABLE
        for method, comps in COMPONENTS.items():
            got = {c["label"]: (c["count"], c["display"]) for c in records[method]["components"]}
            assert got == comps, method
        for r in records.values():
            assert r["total"] == sum(c["count"] for c in r["components"])
        assert elapsed < 1.0


# -- 2. PHM oracle ------------------------------------------------------------


def test_criterion_2_phm_oracle():
    with criterion(2, "PHM blocks vs materialized, 100 configs, <= 1e-10"):
        start = time.perf_counter()
        worst = phm_oracle(100, seed=0)
        assert worst <= 1e-10
        assert time.perf_counter() - start < 10.0


# -- 3. gradient suite --------------------------------------------------------


def test_criterion_3_gradient_suite():
    with criterion(3, "finite-difference gradients, 20 seeds, <= 1e-4"):
        start = time.perf_counter()
        results = gradcheck.run_suite(gradcheck.SEEDS)
        elapsed = time.perf_counter() - start
        worst = gradcheck.worst(results)
        cases = {r.case for r in results}
        assert {"phm-layer", "attention", "layer-norm", "classifier-loss"} <= cases
        for flavor in ("dnn", "phm"):
            for variant in ("plain", "residual", "layernorm", "residual_layernorm"):
                assert f"{flavor}-generator-{variant}" in cases
        assert {r.seed for r in results} == set(range(20))
        assert worst.rel_error <= 1e-4, worst
        assert elapsed < 120.0


# -- 4. degeneration ----------------------------------------------------------

TOY = TransformerConfig(num_layers=2, hidden=8, heads=2, ffn_inner=16, vocab_size=40, max_seq=24)


def random_inputs(rng, count=10):
    out = []
    for i in range(count):
        a = list(rng.integers(5, 40, size=rng.integers(1, 6)))
        if i % 2:
            b = list(rng.integers(5, 40, size=rng.integers(1, 6)))
            out.append([CLS, *a, SEP, *b, EOS])
        else:
            out.append([CLS, *a, EOS])
    return [[int(x) for x in ids] for ids in out]


@pytest.mark.parametrize("depth", ["single", "multi"])
@pytest.mark.parametrize("flavor", ["phm", "dnn"])
def test_criterion_4_degeneration(depth, flavor):
    with criterion(4, "degeneration to prompt tuning, single and multi"):
        rng = np.random.default_rng(4)
        cfg = GeneratorConfig(flavor=flavor, t=3, m=4, d=8, n=2, depth_mode=depth, num_layers=2,
                              sharing="M")
        g = PromptGenerator.init(cfg, seed=1).set_weights_zero()
        for _, up in g.units:
            for b in up.biases:
                b.data[:] = rng.normal(size=b.shape)
        static = StaticPrompt.from_values(g.bias_bank(), deep=depth == "multi")
        bb = Backbone.init(TOY, 0, np.float64).freeze()
        head = ClassifierHead.init(8, 2, dtype=np.float64)
        ours = IDPGModel(bb, g, head, position=1)
        plain = IDPGModel(bb, static, head, position=1)
        for ids in random_inputs(rng):
            assert ours.forward([ids]).data.tobytes() == plain.forward([ids]).data.tobytes()
        batch = random_inputs(rng)
        assert ours.forward(batch).data.tobytes() == plain.forward(batch).data.tobytes()


# -- 5. live audit ------------------------------------------------------------

TOY_DIMS = [dict(d=8, m=4, t=2, n=2, N=2, heads=2), dict(d=16, m=8, t=3, n=4, N=3, heads=4),
            dict(d=12, m=6, t=1, n=2, N=1, heads=3)]


def test_criterion_5_live_audit():
    with criterion(5, "live trainable parameters == accountant count"):
        checked = 0
        for dims in TOY_DIMS:
            tcfg = TransformerConfig(num_layers=dims["N"], hidden=dims["d"], heads=dims["heads"],
                                     ffn_inner=2 * dims["d"], vocab_size=30, max_seq=16)
            for method in acc.CONSTRUCTIBLE:
                bb = Backbone.init(tcfg, 0, np.float64)
                head = ClassifierHead.init(dims["d"], 2, dtype=np.float64)
                if method == "full-finetune":
                    spec = acc.full_finetune_spec(tcfg)
                    model = IDPGModel(bb, None, head)
                else:
                    kw = {k: dims[k] for k in acc.REQUIRED[method] if k in dims}
                    table = None
                    if method == "m-idpg-phm-glove":
                        kw["enc_dim"] = 3 * dims["n"]
                        table = EmbeddingTable({"w": np.ones(kw["enc_dim"])}, kw["enc_dim"])
                    spec = acc.MethodSpec(method, **kw)
                    model = IDPGModel(bb.freeze(), acc.build_prompts(spec), head, 0, table)
                visible = model.trainable_parameters(include_head=False)
                assert sum(t.size for t in visible.values()) == acc.count(spec).total, method
                assert acc.audit(model, spec).ok
                checked += 1
        assert checked == 3 * len(acc.CONSTRUCTIBLE)


# -- 6. desk-scale training ---------------------------------------------------

TASKS = ("keyword-presence", "pair-overlap", "length-regression")


def test_criterion_6_synthetic_training():
    with criterion(6, "synthetic tasks, 5 seeds x 3 tasks, 50 epochs, lr 5e-4"):
        start = time.perf_counter()
        failures = []
        for kind in TASKS:
            for seed in range(5):
                cfg = RunConfig(seed=seed, task={"synthetic": kind, "size": 384},
                                method="m-idpg-phm",
                                prompt={"t": 5, "m": 16, "n": 4, "position": 0},
                                transformer=TransformerConfig(num_layers=2, hidden=32),
                                train=TrainConfig(lr=5e-4, epochs=50, seed=seed))
                run, result = execute(cfg)
                train_m = final_metrics(run, "train")
                dev_m = final_metrics(run, "dev")
                if result.history[-1]["train_loss"] >= result.history[0]["train_loss"]:
                    failures.append((kind, seed, "loss did not decrease"))
                if kind == "length-regression":
                    ok = dev_m["pearson"] >= 0.9
                else:
                    ok = train_m["accuracy"] >= 0.95 and dev_m["accuracy"] >= 0.90
                if not ok:
                    failures.append((kind, seed, train_m, dev_m))
        elapsed = time.perf_counter() - start
        assert not failures, failures
        assert elapsed < 300.0, elapsed


# -- 7. sharing variants ------------------------------------------------------


@pytest.mark.parametrize("flavor", ["dnn", "phm"])
def test_criterion_7_sharing_variants(flavor):
    with criterion(7, "sharing variants: S < M < L and layer behavior"):
        base = dict(flavor=flavor, t=2, m=8, d=8, n=2, depth_mode="multi", num_layers=3)
        counts = [generator_param_count(GeneratorConfig(sharing=s, **base)) for s in "SML"]
        assert counts[0] < counts[1] < counts[2]
        rep = Tensor(np.random.default_rng(0).normal(size=8))
        s_gen = PromptGenerator.init(GeneratorConfig(sharing="S", **base), seed=1)
        outs = [s_gen.generate(rep, i).data for i in range(3)]
        assert all(o.tobytes() == outs[0].tobytes() for o in outs)
        m_gen = PromptGenerator.init(GeneratorConfig(sharing="M", **base), seed=1)
        rng = np.random.default_rng(2)
        for b in m_gen.units[0][1].biases:
            b.data[:] = rng.normal(size=b.shape)
        outs = [m_gen.generate(rep, i).data for i in range(3)]
        assert all(np.linalg.norm(outs[i] - outs[j]) > 1e-8
                   for i in range(3) for j in range(i + 1, 3))


# -- 8. cosine analysis -------------------------------------------------------


def brute_force_topk(pairs, k):
    remaining = list(pairs)
    chosen = []
    for _ in range(k):
        # highest score, then lowest id, by exhaustive scan
        best = remaining[0]
        for p in remaining[1:]:
            if p.score > best.score or (p.score == best.score and p.pair_id < best.pair_id):
                best = p
        chosen.append(best)
        remaining.remove(best)
    counts = {}
    for p in pairs:
        counts.setdefault(p.group, 0)
    for p in chosen:
        counts[p.group] += 1
    return counts


def test_criterion_8_cosine_analysis(tmp_path):
    with criterion(8, "top-k distribution vs brute force; self-comparison"):
        rng = np.random.default_rng(8)
        pairs = [PairScore(i, f"Q{rng.integers(1, 5)}", float(np.round(rng.uniform(-1, 1), 2)))
                 for i in range(200)]
        for k in (0, 1, 100, 150, 200):
            dist = topk_distribution(pairs, k)
            assert sum(dist.counts.values()) == k
            assert dist.counts == brute_force_topk(pairs, k)

        examples = similarity_pairs(60, seed=0)
        vocab = Vocab.build([ex.s1 for ex in examples] + [ex.s2 for ex in examples])
        cfg = GeneratorConfig(flavor="phm", t=2, m=4, d=8, n=2)
        bb = Backbone.init(TOY, 0, np.float64).freeze()
        model = IDPGModel(bb, PromptGenerator.init(cfg, 3), ClassifierHead.init(8, 1,
                          "regression", dtype=np.float64))
        path = tmp_path / "ckpt.json"
        save_model(path, model, vocab)
        a, vocab_a, _ = load_model(path)
        b, _, _ = load_model(path)
        res = analyze({"baseline": a, "idpg": b}, vocab_a, examples, (10, 20, 30))
        assert [d.to_record() for d in res["baseline"]] == [d.to_record() for d in res["idpg"]]


# -- 9. determinism -----------------------------------------------------------

DET_CONFIG = """\
seed: 3
task: {synthetic: pair-overlap, size: 48}
method: m-idpg-phm
prompt: {t: 2, m: 4, n: 2, position: 2}
transformer: {num_layers: 2, hidden: 8, heads: 2, ffn_inner: 16, vocab_size: 64, max_seq: 32}
train: {lr: 5.0e-3, epochs: 3, batch_size: 8, precision: 64}
"""


def test_criterion_9_determinism(tmp_path, capsys):
    with criterion(9, "byte-identical checkpoints and logs across two runs"):
        cfg = tmp_path / "run.yaml"
        cfg.write_text(DET_CONFIG)
        outs = [tmp_path / "a", tmp_path / "b"]
        for out in outs:
            assert main(["train", "--config", str(cfg), "--out", str(out)]) == 0
        capsys.readouterr()
        for name in ("checkpoint.json", "train.log"):
            first, second = ((o / name).read_bytes() for o in outs)
            assert first == second and len(first) > 0
