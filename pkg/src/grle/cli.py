"""Command-line entry point: train, embed, eval, and gradcheck subcommands.

Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error
(the message names the offending flag or config key). All behavior is
flag/config driven; nothing prompts.
"""

import argparse
import dataclasses
import json
import os
import sys

import numpy as np

from . import tensor as T
from .checkpoint import checkpoint_digest, load_checkpoint
from .config import load_config, write_config
from .data import collate, load_corpus, load_examples, make_synthetic_task
from .evaluation import embed_texts, evaluate, parse_metric
from .gradcheck import finite_difference_check
from .model import apply_lora, init_model
from .trainer import (
    STRATEGIES,
    component_loss,
    fit,
    gradcache_step,
    make_reference_scorer,
    naive_step,
)

_FD_TOLERANCE = 1e-4
_CACHE_TOLERANCE = 1e-8


def _build_parser():
    parser = argparse.ArgumentParser(
        prog="grle",
        description="Train, embed with, and evaluate small text-embedding models.",
    )
    sub = parser.add_subparsers(dest="command", metavar="command")

    train = sub.add_parser("train", help="fine-tune a model from a config file")
    train.add_argument("--config", required=True, help="run config (key=value or JSON)")
    train.add_argument("--strategy", choices=STRATEGIES, help="override train.strategy")
    train.add_argument("--seed", type=int, help="override train.seed")
    train.add_argument("--output-dir", help="override run.output_dir")
    train.set_defaults(func=_cmd_train)

    embed = sub.add_parser("embed", help="embed texts with a trained checkpoint")
    embed.add_argument("--checkpoint", required=True, help="checkpoint directory")
    embed.add_argument("--input", required=True, help='JSONL of {"id", "text"}')
    embed.add_argument("--output", required=True, help="where to write embedding JSONL")
    embed.add_argument("--batch-size", type=int, default=64)
    embed.set_defaults(func=_cmd_embed)

    ev = sub.add_parser("eval", help="score a checkpoint on a retrieval corpus")
    ev.add_argument("--checkpoint", required=True, help="checkpoint directory")
    ev.add_argument("--corpus", required=True, help="directory with documents/queries/qrels JSONL")
    ev.add_argument("--metrics", default="ndcg@10,map", help="comma list; first is the main score")
    ev.add_argument("--output", help="report path (default: eval-report.json in the checkpoint)")
    ev.add_argument("--cache-dir", help="directory for cached document embeddings")
    ev.add_argument("--batch-size", type=int, default=64)
    ev.set_defaults(func=_cmd_eval)

    gc = sub.add_parser("gradcheck", help="verify gradients and gradient-cache equivalence")
    gc.add_argument("--config", required=True, help="run config (key=value or JSON)")
    gc.set_defaults(func=_cmd_gradcheck)
    return parser


def run_cli(argv=None):
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    if getattr(args, "func", None) is None:
        parser.print_usage(sys.stderr)
        print("error: missing command", file=sys.stderr)
        return 2
    return args.func(args)


def main():
    sys.exit(run_cli())


def _fail(exc, code):
    print(f"error: {exc}", file=sys.stderr)
    return code


def _load_run_config(args):
    config = load_config(args.config)
    train_overrides = {}
    if getattr(args, "strategy", None) is not None:
        train_overrides["strategy"] = args.strategy
    if getattr(args, "seed", None) is not None:
        train_overrides["seed"] = args.seed
    if train_overrides:
        config = dataclasses.replace(
            config, train=dataclasses.replace(config.train, **train_overrides)
        )
    if getattr(args, "output_dir", None) is not None:
        config = dataclasses.replace(config, output_dir=args.output_dir)
    config.validate()
    return config


def _training_examples(config):
    if config.data.train_path is not None:
        return load_examples(config.data.train_path)
    examples, _ = make_synthetic_task(
        seed=config.train.seed,
        n_train=config.data.n_train,
        n_eval=config.data.n_eval,
        n_keys=config.data.n_keys,
    )
    return examples


def _build_model(config, dtype=np.float32):
    model = init_model(config.model, seed=config.train.seed, dtype=dtype)
    if config.lora is not None:
        model = apply_lora(model, config.lora, seed=config.train.seed)
    return model


def _cmd_train(args):
    try:
        config = _load_run_config(args)
        examples = _training_examples(config)
    except (OSError, ValueError) as exc:
        return _fail(exc, 2)
    try:
        write_config(config, os.path.join(config.output_dir, "config.ini"))
        model = _build_model(config)
        metrics = fit(model, examples, config.train, out_dir=config.output_dir)
        last = metrics[-1]
        print(
            f"trained {last['step']} steps; final loss {last['loss_total']:.6f}; "
            f"outputs in {config.output_dir}"
        )
        return 0
    except Exception as exc:  # noqa: BLE001 - boundary converts to exit status
        return _fail(exc, 1)


def _read_text_lines(path):
    rows = []
    with open(path, encoding="utf-8") as fh:
        for i, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ValueError(f"{path}:{i}: invalid JSON: {exc}") from None
            if "id" not in obj or "text" not in obj:
                raise ValueError(f'{path}:{i}: expected keys "id" and "text"')
            rows.append((str(obj["id"]), str(obj["text"])))
    if not rows:
        raise ValueError(f"{path}: no input texts")
    return rows


def _cmd_embed(args):
    try:
        if args.batch_size <= 0:
            raise ValueError(f"--batch-size must be positive, got {args.batch_size}")
        model = load_checkpoint(args.checkpoint)
        rows = _read_text_lines(args.input)
    except (OSError, ValueError) as exc:
        return _fail(exc, 2)
    try:
        ids = [r[0] for r in rows]
        texts = [r[1] for r in rows]
        embs = embed_texts(model, texts, ids=ids, batch_size=args.batch_size)
        with open(args.output, "w", encoding="utf-8") as fh:
            for text_id, emb in zip(ids, embs):
                fh.write(
                    json.dumps({"id": text_id, "embedding": [float(x) for x in emb]})
                    + "\n"
                )
        print(f"wrote {len(ids)} embeddings to {args.output}")
        return 0
    except Exception as exc:  # noqa: BLE001 - boundary converts to exit status
        return _fail(exc, 1)


def _cmd_eval(args):
    try:
        if args.batch_size <= 0:
            raise ValueError(f"--batch-size must be positive, got {args.batch_size}")
        metrics = tuple(m.strip() for m in args.metrics.split(",") if m.strip())
        if not metrics:
            raise ValueError("--metrics must name at least one metric")
        for name in metrics:
            parse_metric(name)
        model = load_checkpoint(args.checkpoint)
        corpus = load_corpus(args.corpus)
    except (OSError, ValueError) as exc:
        return _fail(exc, 2)
    try:
        report = evaluate(
            model,
            corpus,
            metrics=metrics,
            dataset=os.path.basename(os.path.normpath(args.corpus)),
            checkpoint_id=checkpoint_digest(args.checkpoint),
            cache_dir=args.cache_dir,
            batch_size=args.batch_size,
        )
        out_path = args.output or os.path.join(args.checkpoint, "eval-report.json")
        with open(out_path, "w", encoding="utf-8") as fh:
            fh.write(report.to_json())
            fh.write("\n")
        print(report.main_score)
        return 0
    except Exception as exc:  # noqa: BLE001 - boundary converts to exit status
        return _fail(exc, 1)


def _gradcheck_batch(config):
    """A small batch with hard negatives for gradient verification."""
    examples, _ = make_synthetic_task(
        seed=config.train.seed, n_train=8, n_eval=2, n_keys=4, n_negatives=2
    )
    return collate(examples[:4], config.model.max_seq_len)


def _run_gradcheck(config, out=print):
    """Finite-difference and cache-equivalence suites; returns True iff all pass."""
    model = _build_model(config, dtype=np.float64)
    batch = _gradcheck_batch(config)
    train_cfg = dataclasses.replace(
        config.train, batch_size=batch.size, micro_batch_size=None
    )
    ref = make_reference_scorer(model)
    params = {n: p for n, p in model.parameters().items() if p.requires_grad}
    ok = True

    for comp in ("cl", "sft", "dpo", "kl", "grl"):
        def build(component=comp):
            return component_loss(
                model, batch, train_cfg, component, ref_scorer=ref
            )

        report = finite_difference_check(
            build, params, eps=1e-4, max_coords_per_param=6, seed=0
        )
        passed = report.max_rel_error < _FD_TOLERANCE
        ok &= passed
        out(
            f"fd {comp}: max rel err {report.max_rel_error:.3e} "
            f"({'PASS' if passed else 'FAIL'})"
        )

    def grads_after(step_fn, cfg):
        for p in params.values():
            p.grad = None
        step_fn(model, batch, cfg, step=0, ref_scorer=ref)
        return {n: np.array(p.grad) for n, p in params.items() if p.grad is not None}

    oracle = grads_after(naive_step, train_cfg)
    for micro in (1, 2, batch.size):
        cached = grads_after(
            gradcache_step,
            dataclasses.replace(train_cfg, micro_batch_size=micro),
        )
        diff = max(
            float(np.max(np.abs(cached[n] - oracle[n]))) if n in cached else np.inf
            for n in oracle
        )
        passed = diff <= _CACHE_TOLERANCE
        ok &= passed
        out(
            f"gradcache micro={micro}: max grad diff {diff:.3e} "
            f"({'PASS' if passed else 'FAIL'})"
        )
    for p in params.values():
        p.grad = None
    return ok


def _cmd_gradcheck(args):
    try:
        config = _load_run_config(args)
    except (OSError, ValueError) as exc:
        return _fail(exc, 2)
    try:
        ok = _run_gradcheck(config)
    except Exception as exc:  # noqa: BLE001 - boundary converts to exit status
        return _fail(exc, 1)
    print("all gradient checks passed" if ok else "gradient checks FAILED")
    return 0 if ok else 1


if __name__ == "__main__":
    main()
