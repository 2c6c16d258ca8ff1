"""Run configs: one YAML file selects task, method, dims, seed and optimizer.

    seed: 0
    task:
      synthetic: keyword-presence   # or data_dir + task_type/objective/num_labels
      size: 384
    method: m-idpg-phm
    prompt: {t: 5, m: 16, n: 4, position: 0}
    transformer: {num_layers: 2, hidden: 32}
    train: {lr: 5.0e-4, epochs: 50, batch_size: 16}

``d`` and ``N`` of the method always come from the transformer section.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
import yaml

from . import tensor as F
from .accountant import CONSTRUCTIBLE, MethodSpec, build_prompts, full_finetune_spec
from .checkpoint import save_model
from .data import TsvSchema, few_shot_sample, load_splits, synth_task
from .encoders import EmbeddingTable
from .errors import ConfigError
from .nn import Backbone, ClassifierHead, TransformerConfig, Vocab
from .prompting import IDPGModel
from .trainer import TrainConfig, evaluate, restore, train

SECTIONS = {"seed", "task", "method", "prompt", "transformer", "train", "embeddings"}


def _typed(cls, d, section):
    """Build a config dataclass, coercing YAML strings like '5e-4' to floats."""
    d = dict(d or {})
    fields = {f.name: f for f in dataclasses.fields(cls)}
    unknown = sorted(set(d) - set(fields))
    if unknown:
        raise ConfigError(f"unknown keys in [{section}]: {unknown}")
    for name, value in d.items():
        if isinstance(value, str) and "float" in str(fields[name].type):
            try:
                d[name] = float(value)
            except ValueError:
                raise ConfigError(f"[{section}] {name}: expected a number, got {value!r}") from None
    try:
        return cls(**d)
    except TypeError as exc:
        raise ConfigError(f"[{section}] {exc}") from None


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    task: dict = field(default_factory=lambda: {"synthetic": "keyword-presence", "size": 384})
    method: str = "m-idpg-phm"
    prompt: dict = field(default_factory=lambda: {"t": 5, "m": 16, "n": 4, "position": 0})
    transformer: TransformerConfig = field(default_factory=TransformerConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    embeddings: str | None = None

    def __post_init__(self):
        if self.method not in CONSTRUCTIBLE:
            raise ConfigError(f"method {self.method!r} cannot be trained; choose from {CONSTRUCTIBLE}")
        unknown = sorted(set(self.prompt) - {"t", "m", "n", "position", "enc_dim"})
        if unknown:
            raise ConfigError(f"unknown keys in [prompt]: {unknown}")

    @classmethod
    def from_dict(cls, d):
        d = dict(d or {})
        unknown = sorted(set(d) - SECTIONS)
        if unknown:
            raise ConfigError(f"unknown config sections: {unknown}")
        kw = {k: d[k] for k in ("seed", "task", "method", "embeddings") if k in d}
        if "prompt" in d:
            kw["prompt"] = dict(RunConfig().prompt, **d["prompt"])
        kw["transformer"] = _typed(TransformerConfig, d.get("transformer"), "transformer")
        kw["train"] = _typed(TrainConfig, d.get("train"), "train")
        return cls(**kw)

    def to_dict(self):
        return {"seed": self.seed, "task": dict(self.task), "method": self.method,
                "prompt": dict(self.prompt), "transformer": self.transformer.to_dict(),
                "train": self.train.to_dict(), "embeddings": self.embeddings}

    def with_seed(self, seed):
        return replace(self, seed=seed, train=replace(self.train, seed=seed))

    @property
    def dtype(self):
        return F.dtype_for(self.train.precision)

    @property
    def spec(self):
        tc = self.transformer
        if self.method == "full-finetune":
            return full_finetune_spec(tc)
        p = self.prompt
        enc = p.get("enc_dim")
        if self.method == "m-idpg-phm-glove" and enc is None:
            enc = self.embedding_table().dim
        return MethodSpec(self.method, d=tc.hidden, N=tc.num_layers, m=p.get("m"), t=p.get("t"),
                          n=p.get("n"), enc_dim=enc)

    def embedding_table(self):
        if self.embeddings is None:
            return None
        return EmbeddingTable.load(self.embeddings)


def load_run_config(path):
    with open(path, encoding="utf-8") as fh:
        try:
            raw = yaml.safe_load(fh)
        except yaml.YAMLError as exc:
            raise ConfigError(f"{path}: {exc}") from None
    return RunConfig.from_dict(raw)


def load_task(task, seed=0, max_seq=64):
    task = dict(task)
    if "synthetic" in task:
        return synth_task(task["synthetic"], int(task.get("size", 384)), seed=seed,
                          max_seq=max_seq)
    if "data_dir" not in task:
        raise ConfigError("[task] needs either 'synthetic' or 'data_dir'")
    schema = TsvSchema(task.get("task_type", "single"), task.get("objective", "classification"),
                       int(task.get("num_labels", 2)))
    return load_splits(task["data_dir"], schema, task.get("name"))


@dataclass
class Run:
    config: RunConfig
    model: IDPGModel
    vocab: Vocab
    dataset: object
    spec: MethodSpec


def build(cfg, dataset=None):
    """Fresh model, vocabulary and dataset for a run config."""
    seed, dtype = cfg.seed, cfg.dtype
    ds = dataset if dataset is not None else load_task(cfg.task, seed, cfg.transformer.max_seq)
    vocab = Vocab.build([ex.s1 for ex in ds.train] + [ex.s2 for ex in ds.train if ex.s2])
    backbone = Backbone.init(cfg.transformer, seed, dtype)
    table = cfg.embedding_table()
    spec = cfg.spec
    prompts = None if cfg.method == "full-finetune" else build_prompts(spec, seed, dtype)
    mode = "regression" if ds.objective == "regression" else "classification"
    head = ClassifierHead.init(cfg.transformer.hidden, ds.num_labels, mode, seed, dtype)
    model = IDPGModel(backbone, prompts, head, int(cfg.prompt.get("position", 0)), table)
    return Run(cfg, model, vocab, ds, spec)


def execute(cfg, out_dir=None, dataset=None, sink=None):
    """Train one run; keeps the best-dev state and optionally writes
    ``checkpoint.json`` and ``train.log`` under ``out_dir``."""
    run = build(cfg, dataset)
    tcfg = cfg.train
    if cfg.method == "full-finetune" and tcfg.freeze_backbone:
        tcfg = replace(tcfg, freeze_backbone=False)
    result = train(run.model, run.vocab, run.dataset, tcfg, spec=run.spec, sink=sink)
    restore(run.model.trainable_parameters(), result.best_state)
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        save_model(out / "checkpoint.json", run.model, run.vocab,
                   extra={"run": cfg.to_dict(), "best_epoch": result.best_epoch})
        (out / "train.log").write_text("".join(line + "\n" for line in result.log_lines),
                                       encoding="utf-8")
    return run, result


def final_metrics(run, split="dev"):
    examples = run.dataset.split(split)
    return evaluate(run.model, run.vocab, run.dataset.name, examples, run.dataset.metrics)


def few_shot(cfg, ks=(100, 500, 1000), seeds=range(5), dev_size=1000):
    """Mean and sample stdev of the main test metric per K over ``seeds``."""
    base = load_task(cfg.task, cfg.seed, cfg.transformer.max_seq)
    out = {}
    for k in ks:
        scores = []
        for s in seeds:
            ds = few_shot_sample(base, k, dev_size, s)
            run, _ = execute(cfg.with_seed(s), dataset=ds)
            split = "test" if ds.test else "dev"
            scores.append(final_metrics(run, split)[ds.metrics[0]])
        scores = np.array(scores)
        std = float(scores.std(ddof=1)) if len(scores) > 1 else 0.0
        out[k] = {"mean": float(scores.mean()), "stdev": std, "scores": scores.tolist()}
    return out
