"""Command-line entry point: ``idpg <command> [options]``.

Exit codes: 0 success, 1 a check or run failed, 2 usage or input error.
"""

from __future__ import annotations

import argparse
import json
import sys
import time

import numpy as np

from . import accountant, analysis, gradcheck
from .checkpoint import load_model
from .errors import AuditError, ConfigError, DivergenceError, IdpgError
from .phm import PhmLinear
from .tensor import Tensor

ORACLE_THRESHOLD = 1e-10


class UsageError(Exception):
    pass


def emit(args, record, text):
    if args.format == "record":
        print(json.dumps(record, sort_keys=True))
    else:
        print(text)


# -- count-params -------------------------------------------------------------

DIM_FLAGS = ("d", "N", "m", "t", "n", "enc_dim", "adapters_per_layer", "backbone_params")


def cmd_count_params(args):
    methods = accountant.METHODS if args.method == "all" else (args.method,)
    budgets = []
    for meth in methods:
        spec = accountant.MethodSpec.reference(meth)
        dims = {k: getattr(args, k) for k in DIM_FLAGS if getattr(args, k) is not None}
        if dims:
            spec = accountant.with_dims(spec, **dims)
        budgets.append(accountant.count(spec))
    records = [b.to_record() for b in budgets]
    emit(args, records[0] if len(records) == 1 else records,
         "\n\n".join(b.to_text() for b in budgets))
    return 0


# -- train / eval / few-shot -------------------------------------------------


def _run_config(args):
    from .run import RunConfig, load_run_config

    cfg = load_run_config(args.config) if args.config else RunConfig()
    return cfg.with_seed(args.seed) if args.seed is not None else cfg


def cmd_train(args):
    from .run import execute, final_metrics

    cfg = _run_config(args)
    sink = None if args.format == "record" else print
    run, result = execute(cfg, args.out, sink=sink)
    best = result.best_metric if np.isfinite(result.best_metric) else None
    record = {"best_epoch": result.best_epoch, "best_dev": best,
              "history": result.history}
    if run.dataset.test:
        record["test"] = final_metrics(run, "test")
    emit(args, record, f"best epoch {result.best_epoch}: dev {best!r}")
    return 0


def cmd_eval(args):
    from .run import load_task
    from .trainer import evaluate

    cfg = _run_config(args)
    model, vocab, _ = load_model(args.checkpoint, cfg.embedding_table())
    ds = load_task(cfg.task, cfg.seed, cfg.transformer.max_seq)
    examples = ds.split(args.split)
    if vocab is None:
        raise ConfigError("checkpoint carries no vocabulary")
    scores = evaluate(model, vocab, ds.name, examples, ds.metrics)
    emit(args, scores, " ".join(f"{k}={v!r}" for k, v in scores.items()))
    return 0


def cmd_few_shot(args):
    from .run import few_shot

    cfg = _run_config(args)
    res = few_shot(cfg, args.K, range(args.runs), args.dev_size)
    lines = [f"K={k}\t{r['mean']:.4f} +/- {r['stdev']:.4f}" for k, r in res.items()]
    emit(args, {str(k): v for k, v in res.items()}, "\n".join(lines))
    return 0


# -- checks -------------------------------------------------------------------


def cmd_gradcheck(args):
    seeds = (args.seed,) if args.seed is not None else gradcheck.SEEDS
    start = time.perf_counter()
    results = gradcheck.run_suite(seeds)
    worst = gradcheck.worst(results)
    ok = all(r.ok for r in results)
    record = {"checks": len(results), "worst_rel_error": worst.rel_error,
              "worst_case": worst.case, "worst_param": worst.param, "passed": ok,
              "seconds": time.perf_counter() - start}
    emit(args, record, f"{len(results)} gradient checks, worst relative error "
                       f"{worst.rel_error:.3e} ({worst.case}:{worst.param}) "
                       f"{'PASS' if ok else 'FAIL'}")
    return 0 if ok else 1


def phm_oracle(num_configs=100, seed=0):
    """Largest |block path - materialized path| over random PHM layers (64-bit)."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(num_configs):
        n = int(rng.choice([1, 2, 4, 8, 16]))
        m = n * int(rng.integers(1, 64 // n + 1))
        d = n * int(rng.integers(1, 64 // n + 1))
        layer = PhmLinear.init(d, m, n, rng, dtype=np.float64)
        x = Tensor(rng.normal(size=(3, d)))
        blocks = layer.forward(x, path="blocks").data
        W = sum(np.kron(a.data, b.data) for a, b in zip(layer.A, layer.B))
        dense = x.data @ W.T + layer.biases[0].data
        worst = max(worst, float(np.max(np.abs(blocks - dense))))
    return worst


def cmd_oracle_check(args):
    worst = phm_oracle(args.configs, args.seed or 0)
    ok = worst <= ORACLE_THRESHOLD
    emit(args, {"configs": args.configs, "max_abs_diff": worst, "passed": ok},
         f"{args.configs} PHM configs, max |blocks - materialized| = {worst:.3e} "
         f"{'PASS' if ok else 'FAIL'}")
    return 0 if ok else 1


# -- analysis -----------------------------------------------------------------


def cmd_analyze_cosine(args):
    from .data import TsvSchema, load_tsv

    if args.data:
        ds = load_tsv(args.data, TsvSchema("pair", "regression", 1))
        examples = ds.train
    else:
        examples = analysis.similarity_pairs(args.pairs, args.seed or 0)
    baseline, vocab, _ = load_model(args.baseline)
    idpg, vocab2, _ = load_model(args.idpg)
    if vocab is None or vocab2 is None or vocab.to_dict() != vocab2.to_dict():
        raise ConfigError("both checkpoints must carry the same vocabulary")
    ks = [k for k in args.k if k <= len(examples)] or [len(examples)]
    res = analysis.analyze({"baseline": baseline, "idpg": idpg}, vocab, examples, ks)
    record = {name: [d.to_record() for d in dists] for name, dists in res.items()}
    emit(args, record, analysis.format_table(res))
    return 0


# -- parser -------------------------------------------------------------------


class Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--format", choices=("text", "record"), default="text")
    common.add_argument("--seed", type=int, default=None)
    common.add_argument("--config", default=None, help="YAML run config")

    p = Parser(prog="idpg", description="Instance-dependent prompt generation toolkit")
    sub = p.add_subparsers(dest="command", required=True, parser_class=Parser)

    c = sub.add_parser("count-params", parents=[common], help="trainable-parameter budgets")
    c.add_argument("--method", default="all", choices=("all",) + accountant.METHODS)
    for k in DIM_FLAGS:
        c.add_argument(f"--{k.replace('_', '-')}", dest=k, type=int, default=None)
    c.set_defaults(func=cmd_count_params)

    c = sub.add_parser("train", parents=[common], help="train from a run config")
    c.add_argument("--out", default=None, help="directory for checkpoint.json and train.log")
    c.set_defaults(func=cmd_train)

    c = sub.add_parser("eval", parents=[common], help="evaluate a checkpoint")
    c.add_argument("--checkpoint", required=True)
    c.add_argument("--split", default="dev", choices=("train", "dev", "test"))
    c.set_defaults(func=cmd_eval)

    c = sub.add_parser("gradcheck", parents=[common], help="finite-difference gradient suite")
    c.set_defaults(func=cmd_gradcheck)

    c = sub.add_parser("oracle-check", parents=[common], help="PHM block vs materialized")
    c.add_argument("--configs", type=int, default=100)
    c.set_defaults(func=cmd_oracle_check)

    c = sub.add_parser("analyze-cosine", parents=[common], help="top-k cosine rank analysis")
    c.add_argument("--baseline", required=True, help="checkpoint of the comparison model")
    c.add_argument("--idpg", required=True, help="checkpoint of the prompted model")
    c.add_argument("--data", default=None, help="pair TSV with graded similarity labels")
    c.add_argument("--pairs", type=int, default=400, help="synthetic pairs when --data is absent")
    c.add_argument("-k", type=int, nargs="+", default=list(analysis.TOPK))
    c.set_defaults(func=cmd_analyze_cosine)

    c = sub.add_parser("few-shot", parents=[common], help="K-shot sweep over seeds")
    c.add_argument("--K", type=int, nargs="+", default=[100, 500, 1000])
    c.add_argument("--runs", type=int, default=5)
    c.add_argument("--dev-size", type=int, default=1000)
    c.set_defaults(func=cmd_few_shot)
    return p


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return 2
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    try:
        return args.func(args)
    except (DivergenceError, AuditError) as exc:
        print(f"idpg: {exc}", file=sys.stderr)
        return 1
    except (IdpgError, OSError) as exc:
        print(f"idpg: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
