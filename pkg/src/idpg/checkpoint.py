"""JSON checkpoints: parameter path -> {dtype, shape, values}.

Values are written row-major through ``float.__repr__``, which round-trips
every float32 and float64 value exactly. Keys are sorted so two saves of the
same state produce identical bytes.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .errors import SchemaError
from .generator import GeneratorConfig, PromptGenerator, StaticPrompt
from .nn import Backbone, ClassifierHead, TransformerConfig, Vocab
from .tensor import Tensor

FORMAT_VERSION = 1
DTYPES = {"float32": np.float32, "float64": np.float64}


def encode_tensor(t):
    data = t.data if isinstance(t, Tensor) else np.asarray(t)
    name = data.dtype.name
    if name not in DTYPES:
        raise SchemaError(f"cannot serialize dtype {name}")
    return {"dtype": name, "shape": list(data.shape),
            "values": [float(v) for v in data.reshape(-1)]}


def decode_tensor(record, path="?"):
    try:
        dtype = DTYPES[record["dtype"]]
        shape = tuple(int(s) for s in record["shape"])
        values = np.array(record["values"], dtype=np.float64)
    except (KeyError, TypeError, ValueError) as exc:
        raise SchemaError(f"bad tensor record at {path}: {exc}") from None
    if values.size != int(np.prod(shape, dtype=np.int64)):
        raise SchemaError(f"{path}: {values.size} values do not fill shape {shape}")
    return values.astype(dtype).reshape(shape)


def dumps(header, params):
    doc = {"header": dict(header, format_version=FORMAT_VERSION),
           "params": {name: encode_tensor(t) for name, t in params.items()}}
    return json.dumps(doc, sort_keys=True, separators=(",", ":")) + "\n"


def loads(text):
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise SchemaError(exc.msg, exc.lineno) from None
    if not isinstance(doc, dict) or "header" not in doc or "params" not in doc:
        raise SchemaError("checkpoint needs 'header' and 'params' objects")
    version = doc["header"].get("format_version")
    if version != FORMAT_VERSION:
        raise SchemaError(f"unsupported checkpoint format_version {version!r}")
    params = {name: decode_tensor(rec, name) for name, rec in doc["params"].items()}
    return doc["header"], params


def save_params(path, params, header=None):
    Path(path).write_text(dumps(header or {}, params), encoding="utf-8")


def load_params(path):
    return loads(Path(path).read_text(encoding="utf-8"))


# -- whole models -------------------------------------------------------------


def _prompt_header(prompts):
    if prompts is None:
        return None
    if isinstance(prompts, StaticPrompt):
        return {"kind": "static", "t": prompts.t, "d": prompts.d, "deep": prompts.deep,
                "count": prompts.num_prompts}
    return {"kind": "generator", "config": prompts.config.to_dict()}


def model_params(model):
    out = dict(model.backbone.named_parameters())
    if model.prompts is not None:
        out.update(model.prompts.named_parameters())
    out.update(model.head.named_parameters())
    return out


def save_model(path, model, vocab=None, extra=None):
    header = {
        "transformer": model.backbone.config.to_dict(),
        "prompts": _prompt_header(model.prompts),
        "head": {"mode": model.head.mode, "num_labels": model.head.num_labels},
        "position": model.position,
        "backbone_frozen": model.backbone.frozen,
        "vocab": vocab.to_dict() if vocab is not None else None,
    }
    if extra:
        header["extra"] = extra
    save_params(path, model_params(model), header)


def _fill(named, values, source):
    missing = sorted(set(named) - set(values))
    if missing:
        raise SchemaError(f"checkpoint lacks {source} parameters: {missing[:3]}")
    for name, t in named.items():
        v = values[name]
        if v.shape != t.shape:
            raise SchemaError(f"{name}: checkpoint shape {v.shape} != model shape {t.shape}")
        t.data = v.copy()


def load_model(path, embedding_table=None):
    """Rebuild (model, vocab, header) from a checkpoint written by ``save_model``."""
    from .prompting import IDPGModel

    header, values = load_params(path)
    dtype = next(iter(values.values())).dtype if values else np.float32
    config = TransformerConfig.from_dict(header["transformer"])
    backbone = Backbone.init(config, 0, dtype)
    _fill(backbone.named_parameters(), values, "backbone")
    if header.get("backbone_frozen"):
        backbone.freeze()
    ph = header.get("prompts")
    prompts = None
    if ph is not None and ph["kind"] == "static":
        prompts = StaticPrompt.init(ph["t"], ph["d"], ph["count"], ph["deep"], dtype=dtype)
    elif ph is not None:
        prompts = PromptGenerator.init(GeneratorConfig.from_dict(ph["config"]), 0, dtype)
    if prompts is not None:
        _fill(prompts.named_parameters(), values, "prompt")
    hh = header["head"]
    head = ClassifierHead.init(config.hidden, hh["num_labels"], hh["mode"], dtype=dtype)
    _fill(head.named_parameters(), values, "head")
    known = set(backbone.named_parameters()) | set(head.named_parameters())
    if prompts is not None:
        known |= set(prompts.named_parameters())
    extra = sorted(set(values) - known)
    if extra:
        raise SchemaError(f"checkpoint has unknown parameters: {extra[:3]}")
    model = IDPGModel(backbone, prompts, head, header.get("position", 0), embedding_table)
    vocab = Vocab.from_dict(header["vocab"]) if header.get("vocab") else None
    return model, vocab, header
