import numpy as np
import pytest

from idpg.accountant import MethodSpec, audit
from idpg.data import synth_task
from idpg.errors import ConfigError, DivergenceError
from idpg.nn import TransformerConfig
from idpg.run import RunConfig, build, execute
from idpg.tensor import Tensor
from idpg.trainer import (OptimState, TrainConfig, adamw_step, decays, evaluate, learning_rate,
                          make_batches, predict, snapshot, train)


def param(value, name="w"):
    return Tensor(np.asarray(value, dtype=np.float64), requires_grad=True, name=name)


def test_first_step_is_minus_lr():
    p = param([0.0])
    p.grad = np.array([1.0])
    cfg = TrainConfig(lr=1e-3, weight_decay=0.0)
    adamw_step({"w": p}, OptimState(), cfg)
    assert p.data[0] == pytest.approx(-1e-3, rel=1e-5)


def test_zero_gradient_is_fixed_point():
    p = param([0.3, -2.0])
    p.grad = np.zeros(2)
    adamw_step({"w": p}, OptimState(), TrainConfig(weight_decay=0.0))
    assert p.data.tolist() == [0.3, -2.0]


def test_bias_and_norm_not_decayed():
    names = ["generator/u0/up/bias.0", "phm/generator/u0/down/bias.0", "generator/ln_out/gain",
             "prompt/layer0", "head/bias"]
    assert not any(decays(n) for n in names)
    assert decays("phm/generator/u0/up/B.0") and decays("head/weight")
    b = param([1.0], "head/bias")
    b.grad = np.zeros(1)
    adamw_step({"head/bias": b}, OptimState(), TrainConfig(weight_decay=0.1, lr=0.1))
    assert b.data[0] == 1.0
    w = param([1.0], "head/weight")
    w.grad = np.zeros(1)
    adamw_step({"head/weight": w}, OptimState(), TrainConfig(weight_decay=0.1, lr=0.1))
    assert w.data[0] == pytest.approx(0.99)


def test_nan_gradient_names_parameter():
    p = param([1.0], "generator/u0/up/B.0")
    p.grad = np.array([np.nan])
    with pytest.raises(DivergenceError, match="up/B.0"):
        adamw_step({p.name: p}, OptimState(), TrainConfig())


def test_linear_schedule():
    cfg = TrainConfig(lr=1.0, schedule="linear", warmup_fraction=0.1)
    assert learning_rate(cfg, 5, 100) == 0.5
    assert learning_rate(cfg, 10, 100) == 1.0
    assert learning_rate(cfg, 100, 100) == 0.0


def test_config_validation():
    with pytest.raises(ConfigError):
        TrainConfig(adam_beta1=1.0)
    with pytest.raises(ConfigError):
        TrainConfig(lr=-1)


TOY = TransformerConfig(num_layers=2, hidden=8, heads=2, ffn_inner=16, vocab_size=64, max_seq=32)


def toy_run(method="m-idpg-phm", epochs=2, lr=5e-3, kind="keyword-presence", **train_kw):
    cfg = RunConfig(seed=0, task={"synthetic": kind, "size": 32}, method=method,
                    prompt={"t": 2, "m": 4, "n": 2, "position": 0}, transformer=TOY,
                    train=TrainConfig(lr=lr, epochs=epochs, batch_size=8, precision=64,
                                      **train_kw))
    return cfg


def test_lr_zero_changes_nothing():
    cfg = toy_run(lr=0.0, epochs=1)
    run = build(cfg)
    run.model.backbone.freeze()
    before = snapshot(run.model.trainable_parameters())
    train(run.model, run.vocab, run.dataset, cfg.train, spec=run.spec)
    after = snapshot(run.model.trainable_parameters())
    assert all(before[k].tobytes() == after[k].tobytes() for k in before)


def test_backbone_frozen_generator_moves():
    cfg = toy_run()
    run = build(cfg)
    bb = snapshot(run.model.backbone.params)
    gen = snapshot(run.model.prompts.named_parameters())
    train(run.model, run.vocab, run.dataset, cfg.train, spec=run.spec)
    assert all(bb[k].tobytes() == v.data.tobytes() for k, v in run.model.backbone.params.items())
    moved = [np.any(gen[k] != v.data) for k, v in run.model.prompts.named_parameters().items()]
    assert all(moved)
    # the optimizer's parameter set is the audited set plus the head
    assert audit(run.model, run.spec).ok
    names = set(run.model.trainable_parameters()) - {"head/weight", "head/bias"}
    assert names == set(run.model.prompts.named_parameters())


def test_full_finetune_moves_backbone():
    run, _ = execute(toy_run("full-finetune", epochs=1))
    fresh = build(toy_run("full-finetune", epochs=1))
    tok = "backbone/embed/tokens"
    assert np.any(run.model.backbone.params[tok].data != fresh.model.backbone.params[tok].data)


def test_loss_decreases():
    cfg = toy_run(epochs=6)
    run = build(cfg)
    result = train(run.model, run.vocab, run.dataset, cfg.train, spec=run.spec)
    assert result.history[-1]["train_loss"] < result.history[0]["train_loss"]
    assert len(result.log_lines) == 6 and result.log_lines[0].startswith("epoch=1 ")


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_divergence_aborts():
    cfg = toy_run(lr=1e3, epochs=3)
    run = build(cfg)
    run.model.head.weight.data[:] = np.inf
    with pytest.raises(DivergenceError):
        train(run.model, run.vocab, run.dataset, cfg.train)


def test_batched_predictions_equal_single():
    run = build(toy_run())
    examples = synth_task("keyword-presence", 32, seed=9).train
    batched = predict(run.model, run.vocab, "x", examples, batch_size=32)
    single = np.concatenate([predict(run.model, run.vocab, "x", [ex], 1) for ex in examples])
    assert batched.tolist() == single.tolist()


def test_evaluate_single_correct_example():
    run = build(toy_run())
    ex = run.dataset.train[0]
    pred = predict(run.model, run.vocab, "x", [ex])[0]
    fixed = type(ex)(ex.id, ex.s1, ex.s2, int(pred))
    assert evaluate(run.model, run.vocab, "x", [fixed], ("accuracy",)) == {"accuracy": 1.0}
    with pytest.raises(ConfigError):
        evaluate(run.model, run.vocab, "x", [], ("accuracy",))


def test_regression_eval_keys():
    run = build(toy_run(kind="length-regression"))
    scores = evaluate(run.model, run.vocab, "len", run.dataset.dev, run.dataset.metrics)
    assert set(scores) == {"pearson", "spearman"}


def test_batches_carry_cache_keys():
    run = build(toy_run())
    b = make_batches(run.vocab, "kw", run.dataset.train, 5)
    assert len(b) == 7 and b[0].keys[0] == ("kw", run.dataset.train[0].id)
