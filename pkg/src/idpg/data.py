"""Task datasets: TSV I/O, few-shot sampling, and synthetic desk-scale tasks."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .errors import ConfigError, ParseError, SchemaError, SizeError

SYNTH_KINDS = ("keyword-presence", "pair-overlap", "length-regression")


@dataclass(frozen=True)
class Example:
    id: int
    s1: str
    s2: str | None
    label: float | int

    @property
    def text(self):
        return (self.s1, self.s2)


@dataclass(frozen=True)
class TsvSchema:
    task_type: str = "single"          # single | pair
    objective: str = "classification"  # classification | regression
    num_labels: int = 2

    def __post_init__(self):
        if self.task_type not in ("single", "pair"):
            raise ConfigError(f"task_type must be single or pair, got {self.task_type!r}")
        if self.objective not in ("classification", "regression"):
            raise ConfigError(f"objective must be classification or regression")


@dataclass
class TaskDataset:
    name: str
    task_type: str
    objective: str
    num_labels: int
    train: list = field(default_factory=list)
    dev: list = field(default_factory=list)
    test: list = field(default_factory=list)

    def __post_init__(self):
        self.validate()

    @property
    def schema(self):
        return TsvSchema(self.task_type, self.objective, self.num_labels)

    @property
    def metrics(self):
        if self.objective == "regression":
            return ("pearson", "spearman")
        if self.num_labels == 2:
            return ("accuracy", "f1")
        return ("accuracy",)

    def split(self, name):
        if name not in ("train", "dev", "test"):
            raise ConfigError(f"unknown split {name!r}")
        return getattr(self, name)

    def validate(self):
        seen = set()
        pair = self.task_type == "pair"
        for split in (self.train, self.dev, self.test):
            for ex in split:
                if ex.id in seen:
                    raise SchemaError(f"example id {ex.id} appears in more than one split")
                seen.add(ex.id)
                if (ex.s2 is not None) != pair:
                    raise SchemaError(f"example {ex.id}: s2 presence does not match {self.task_type}")
                if self.objective == "classification" and not 0 <= ex.label < self.num_labels:
                    raise SchemaError(f"example {ex.id}: label {ex.label} outside [0, {self.num_labels})")


# -- TSV ------------------------------------------------------------------


def _parse_label(raw, schema, lineno):
    try:
        if schema.objective == "classification":
            value = int(raw)
            if not 0 <= value < schema.num_labels:
                raise ParseError(f"label {value} outside [0, {schema.num_labels})", lineno)
            return value
        return float(raw)
    except ValueError:
        raise ParseError(f"bad label {raw!r}", lineno) from None


def read_examples(path, schema, start_id=0):
    """Parse ``label<TAB>s1[<TAB>s2]`` rows; '#' lines are comments."""
    want = 3 if schema.task_type == "pair" else 2
    out = []
    with open(path, encoding="utf-8", newline="") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\r\n")
            if not line.strip() or line.startswith("#"):
                continue
            cols = line.split("\t")
            if len(cols) != want:
                raise SchemaError(f"expected {want} tab-separated columns, got {len(cols)}", lineno)
            label = _parse_label(cols[0], schema, lineno)
            s2 = cols[2] if want == 3 else None
            out.append(Example(start_id + len(out), cols[1], s2, label))
    return out


def load_tsv(path, schema, name=None):
    """Load one TSV file as the train split of a dataset; ids follow line order."""
    path = Path(path)
    examples = read_examples(path, schema)
    return TaskDataset(name or path.stem, schema.task_type, schema.objective, schema.num_labels,
                       train=examples)


def load_splits(directory, schema, name=None):
    """Load train/dev/test TSVs from a directory with globally unique ids."""
    directory = Path(directory)
    splits, next_id = {}, 0
    for split in ("train", "dev", "test"):
        path = directory / f"{split}.tsv"
        rows = read_examples(path, schema, next_id) if path.exists() else []
        next_id += len(rows)
        splits[split] = rows
    return TaskDataset(name or directory.name, schema.task_type, schema.objective,
                       schema.num_labels, **splits)


def _format_label(label, objective):
    return str(int(label)) if objective == "classification" else repr(float(label))


def write_tsv(path, examples, objective="classification"):
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, delimiter="\t", lineterminator="\n", quoting=csv.QUOTE_NONE,
                            escapechar="\\")
        for ex in examples:
            row = [_format_label(ex.label, objective), ex.s1]
            if ex.s2 is not None:
                row.append(ex.s2)
            writer.writerow(row)


def write_splits(directory, ds):
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for split in ("train", "dev", "test"):
        write_tsv(directory / f"{split}.tsv", ds.split(split), ds.objective)


# -- sampling -------------------------------------------------------------


def few_shot_sample(ds, K, dev_size, seed):
    """Sample K training and ``dev_size`` development examples from ``ds.train``.

    Classification samples are label-stratified: K // C per class with the
    remainder handed out round-robin in label order. The dev subset is drawn
    uniformly from what is left. The original test split is kept (falling
    back to the original dev split when there is no test split).
    """
    pool = sorted(ds.train, key=lambda ex: ex.id)
    if K < 0 or dev_size < 0 or K + dev_size > len(pool):
        raise SizeError(f"need K + dev_size <= {len(pool)}, got {K} + {dev_size}")
    rng = np.random.default_rng(seed)
    if ds.objective == "classification":
        by_label = {c: [ex for ex in pool if ex.label == c] for c in range(ds.num_labels)}
        for c in by_label:
            order = rng.permutation(len(by_label[c]))
            by_label[c] = [by_label[c][i] for i in order]
        quota = {c: K // ds.num_labels for c in by_label}
        for j in range(K % ds.num_labels):
            quota[j] += 1
        # shortfalls move round-robin to classes that still have examples
        short = sum(max(0, quota[c] - len(by_label[c])) for c in quota)
        quota = {c: min(quota[c], len(by_label[c])) for c in quota}
        while short:
            moved = False
            for c in sorted(quota):
                if short and quota[c] < len(by_label[c]):
                    quota[c] += 1
                    short -= 1
                    moved = True
            if not moved:
                raise SizeError("not enough examples to fill the stratified sample")
        train = [ex for c in sorted(by_label) for ex in by_label[c][: quota[c]]]
        train = [train[i] for i in rng.permutation(len(train))]
    else:
        order = rng.permutation(len(pool))
        train = [pool[i] for i in order[:K]]
    chosen = {ex.id for ex in train}
    rest = [ex for ex in pool if ex.id not in chosen]
    dev = [rest[i] for i in rng.permutation(len(rest))[:dev_size]]
    test = ds.test if ds.test else ds.dev
    return replace(ds, name=f"{ds.name}-K{K}-s{seed}", train=train, dev=dev, test=list(test))


def swap_pairs_and_concat(ds):
    """Double a pair dataset by appending every example with s1 and s2 swapped."""
    if ds.task_type != "pair":
        raise ConfigError("swap_pairs_and_concat needs a sentence-pair dataset")
    next_id = 1 + max(ex.id for split in (ds.train, ds.dev, ds.test) for ex in split)
    swapped = []
    for ex in ds.train:
        swapped.append(Example(next_id, ex.s2, ex.s1, ex.label))
        next_id += 1
    return replace(ds, name=f"{ds.name}-doubled", train=list(ds.train) + swapped)


# -- synthetic tasks ----------------------------------------------------------

CONTENT_WORDS = tuple(f"w{i}" for i in range(24))
# pair-overlap first sentences draw from one half and negative second
# sentences from the other, which keeps the label readable from word counts
PAIR_SOURCE_WORDS = CONTENT_WORDS[:12]
PAIR_OTHER_WORDS = CONTENT_WORDS[12:]
TRIGGER = "zap"


def jaccard(a, b):
    a, b = set(a.split()), set(b.split())
    if not a and not b:
        return 1.0
    return len(a & b) / len(a | b)


def _keyword_example(rng, i, min_len=2, max_len=6):
    length = int(rng.integers(min_len, max_len + 1))
    words = list(rng.choice(CONTENT_WORDS, size=length))
    label = int(i % 2)
    if label:
        words[int(rng.integers(length))] = TRIGGER
    return " ".join(words), None, label


def _overlap_example(rng, i, min_len=3, max_len=6):
    length = int(rng.integers(min_len, max_len + 1))
    s1 = list(rng.choice(PAIR_SOURCE_WORDS, size=length, replace=False))
    if i % 2:
        s2 = [s1[j] for j in rng.permutation(length)]
    else:
        other = int(rng.integers(min_len, max_len + 1))
        s2 = list(rng.choice(PAIR_OTHER_WORDS, size=other, replace=False))
    a, b = " ".join(s1), " ".join(s2)
    return a, b, int(jaccard(a, b) > 0.5)


def _length_example(rng, i, max_seq=64, max_len=20):
    length = int(rng.integers(1, max_len + 1))
    words = rng.choice(CONTENT_WORDS, size=length)
    return " ".join(words), None, length / max_seq


def synth_task(kind, size, seed=0, dev_size=None, test_size=None, max_seq=64):
    """Build a synthetic task whose label is a simple function of the text.

    keyword-presence   label 1 iff the sentence contains the trigger token
    pair-overlap       label 1 iff Jaccard(s1, s2) > 0.5
    length-regression  target = token count / max_seq
    """
    if kind not in SYNTH_KINDS:
        raise ConfigError(f"unknown synthetic task {kind!r}; choose from {SYNTH_KINDS}")
    dev_size = max(1, size // 4) if dev_size is None else dev_size
    test_size = max(1, size // 4) if test_size is None else test_size
    rng = np.random.default_rng(seed)
    rows = []
    for i in range(size + dev_size + test_size):
        if kind == "keyword-presence":
            rows.append(_keyword_example(rng, i))
        elif kind == "pair-overlap":
            rows.append(_overlap_example(rng, i))
        else:
            rows.append(_length_example(rng, i, max_seq))
    rows = [rows[j] for j in rng.permutation(len(rows))]
    examples = [Example(j, s1, s2, label) for j, (s1, s2, label) in enumerate(rows)]
    task_type = "pair" if kind == "pair-overlap" else "single"
    objective = "regression" if kind == "length-regression" else "classification"
    return TaskDataset(kind, task_type, objective, 1 if objective == "regression" else 2,
                       train=examples[:size], dev=examples[size:size + dev_size],
                       test=examples[size + dev_size:])
