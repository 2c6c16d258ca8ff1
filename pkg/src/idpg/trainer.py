"""AdamW optimisation with a frozen backbone, and batched evaluation."""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field

import numpy as np

from . import metrics as M
from . import tensor as F
from .errors import ConfigError, DivergenceError
from .nn import cross_entropy, mse

log = logging.getLogger(__name__)

LR_GRID = (5e-3, 1e-3, 5e-4, 1e-4)


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 5e-4
    schedule: str = "fixed"         # fixed | linear
    warmup_fraction: float = 0.0
    batch_size: int = 16
    epochs: int = 50
    weight_decay: float = 0.1
    adam_eps: float = 1e-6
    adam_beta1: float = 0.9
    adam_beta2: float = 0.98
    freeze_backbone: bool = True
    seed: int = 0
    precision: int = 32
    grad_clip: float | None = None

    def __post_init__(self):
        if not self.lr >= 0:
            raise ConfigError(f"lr must be >= 0, got {self.lr}")
        if not (0 < self.adam_beta1 < 1 and 0 < self.adam_beta2 < 1):
            raise ConfigError("Adam betas must lie strictly between 0 and 1")
        if self.batch_size < 1 or self.epochs < 0:
            raise ConfigError("batch_size must be >= 1 and epochs >= 0")
        if self.schedule not in ("fixed", "linear"):
            raise ConfigError(f"unknown schedule {self.schedule!r}")
        if not 0.0 <= self.warmup_fraction < 1.0:
            raise ConfigError("warmup_fraction must lie in [0, 1)")
        F.dtype_for(self.precision)

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


def decays(name):
    """Decoupled weight decay skips biases, norm parameters and prompt tables."""
    leaf = name.rsplit("/", 1)[-1]
    return not (leaf.startswith("bias") or leaf in ("gain", "shift") or name.startswith("prompt/"))


@dataclass
class OptimState:
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def learning_rate(cfg, step, total_steps):
    """Learning rate for 1-based ``step``."""
    if cfg.schedule == "fixed":
        return cfg.lr
    warm = int(round(cfg.warmup_fraction * total_steps))
    if warm and step <= warm:
        return cfg.lr * step / warm
    remaining = max(1, total_steps - warm)
    return cfg.lr * max(0.0, (total_steps - step) / remaining)


def adamw_step(params, state, cfg, lr=None):
    """One bias-corrected Adam update with decoupled weight decay.

    ``params`` maps names to leaf tensors whose ``.grad`` is populated; a
    missing grad counts as zero.
    """
    lr = cfg.lr if lr is None else lr
    state.step += 1
    b1, b2 = cfg.adam_beta1, cfg.adam_beta2
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for name, p in params.items():
        g = p.grad if p.grad is not None else np.zeros_like(p.data)
        if not np.all(np.isfinite(g)):
            raise DivergenceError(f"non-finite gradient in {name}", path=name)
        dtype = p.data.dtype
        m = state.m.get(name)
        if m is None:
            m = np.zeros_like(p.data)
            v = np.zeros_like(p.data)
        else:
            v = state.v[name]
        m = (b1 * m + (1.0 - b1) * g).astype(dtype)
        v = (b2 * v + (1.0 - b2) * g * g).astype(dtype)
        state.m[name], state.v[name] = m, v
        if lr == 0.0:
            continue
        if cfg.weight_decay and decays(name):
            p.data *= dtype.type(1.0 - lr * cfg.weight_decay)
        update = (m / c1) / (np.sqrt(v / c2) + cfg.adam_eps)
        p.data -= (lr * update).astype(dtype)
    return state


def _clip(params, max_norm):
    total = np.sqrt(sum(float(np.sum(p.grad * p.grad)) for p in params.values()
                        if p.grad is not None))
    if total > max_norm:
        for p in params.values():
            if p.grad is not None:
                p.grad = p.grad * (max_norm / (total + 1e-12))


@dataclass
class Batch:
    ids: list
    texts: list
    keys: list
    labels: np.ndarray


def make_batches(vocab, dataset_name, examples, batch_size, order=None):
    order = range(len(examples)) if order is None else order
    order = list(order)
    out = []
    for start in range(0, len(order), batch_size):
        chunk = [examples[i] for i in order[start:start + batch_size]]
        out.append(Batch(
            ids=[vocab.encode(ex.s1, ex.s2) for ex in chunk],
            texts=[ex.text for ex in chunk],
            keys=[(dataset_name, ex.id) for ex in chunk],
            labels=np.array([ex.label for ex in chunk]),
        ))
    return out


def batch_loss(model, batch, tape, training=False, rng=None):
    out = model.forward(batch.ids, tape, texts=batch.texts, keys=batch.keys,
                        training=training, rng=rng)
    if model.head.mode == "regression":
        return mse(out, batch.labels), out
    return cross_entropy(out, batch.labels.astype(np.int64)), out


def predict(model, vocab, dataset_name, examples, batch_size=32):
    preds = []
    for batch in make_batches(vocab, dataset_name, examples, batch_size):
        out = model.forward(batch.ids, texts=batch.texts, keys=batch.keys).data
        preds.append(out if model.head.mode == "regression" else out.argmax(axis=-1))
    return np.concatenate(preds)


def evaluate(model, vocab, dataset_name, examples, metric_names, batch_size=32):
    """Metric map over ``examples`` (must be non-empty)."""
    if not examples:
        raise ConfigError("cannot evaluate an empty split")
    preds = predict(model, vocab, dataset_name, examples, batch_size)
    golds = np.array([ex.label for ex in examples])
    return M.compute(metric_names, preds, golds)


def snapshot(params):
    return {name: p.data.copy() for name, p in params.items()}


def restore(params, state):
    for name, p in params.items():
        p.data[...] = state[name]


@dataclass
class TrainResult:
    history: list
    best_epoch: int
    best_metric: float
    best_state: dict
    log_lines: list


def format_log_line(record):
    parts = [f"epoch={record['epoch']}", f"train_loss={record['train_loss']!r}"]
    parts += [f"{k}={v!r}" for k, v in sorted(record.items())
              if k not in ("epoch", "train_loss")]
    return " ".join(parts)


def train(model, vocab, ds, cfg, spec=None, sink=None):
    """Train the model's trainable parameters on ``ds.train``.

    Before the first step the live trainable set is audited against
    ``spec`` (when given). Model selection keeps the parameters of the
    epoch with the best dev value of the dataset's first metric.
    """
    from .accountant import audit

    if cfg.freeze_backbone:
        model.backbone.freeze()
    if spec is not None:
        audit(model, spec)
    params = model.trainable_parameters()
    rng = np.random.default_rng(cfg.seed)
    state = OptimState()
    steps_per_epoch = -(-len(ds.train) // cfg.batch_size)
    total = steps_per_epoch * cfg.epochs
    metric_names = ds.metrics
    main = metric_names[0]
    history, lines = [], []
    best_epoch, best_metric, best_state = 0, -np.inf, snapshot(params)
    for epoch in range(1, cfg.epochs + 1):
        order = rng.permutation(len(ds.train))
        losses = []
        for batch in make_batches(vocab, ds.name, ds.train, cfg.batch_size, order):
            for p in params.values():
                p.grad = None
            tape = F.Tape(model.dtype)
            loss, _ = batch_loss(model, batch, tape, training=True, rng=rng)
            value = float(loss.item())
            if not np.isfinite(value):
                raise DivergenceError(f"loss became {value} at epoch {epoch}")
            tape.backward(loss)
            if cfg.grad_clip:
                _clip(params, cfg.grad_clip)
            lr = learning_rate(cfg, state.step + 1, total)
            adamw_step(params, state, cfg, lr)
            losses.append(value)
        record = {"epoch": epoch, "train_loss": float(np.mean(losses)) if losses else 0.0}
        if ds.dev:
            dev = evaluate(model, vocab, ds.name, ds.dev, metric_names)
            record.update({f"dev_{k}": v for k, v in dev.items()})
            score = dev[main]
        else:
            score = -record["train_loss"]
        if score > best_metric:
            best_epoch, best_metric, best_state = epoch, score, snapshot(params)
        history.append(record)
        line = format_log_line(record)
        lines.append(line)
        log.info(line)
        if sink is not None:
            sink(line)
    return TrainResult(history, best_epoch, float(best_metric), best_state, lines)
