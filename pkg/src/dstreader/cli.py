"""Command-line entry point.

Subcommands: train, predict, eval, ablate, analyze, combine, ensemble,
validate-corpus.  Exit codes: 0 success, 1 usage error, 2 data error,
3 runtime failure.  All randomness flows from --seed.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from . import evaluation, pipeline, trainer
from .corpus import (
    CorpusError,
    build_examples,
    derivability,
    load_corpus,
    load_ontology,
    load_schema,
    summarize_examples,
)
from .encoder import (
    EMBED_PRETRAINED,
    EMBED_TRAINABLE,
    EmbeddingFileError,
    load_embedding_file,
)
from .evaluation import EvalError, compute_report, per_slot_accuracy
from .models import (
    KIND_JST,
    MODEL_KINDS,
    load_model,
)
from .nncore import CheckpointError
from .pipeline import (
    EnsembleTracker,
    OracleMask,
    PipelineError,
    SingleTracker,
    hybrid_combine,
    jst_track_corpus,
    read_predictions,
    track_corpus,
    write_predictions,
)
from .trainer import TrainConfig, TrainError, train, write_training_log

DATA_ERRORS = (
    CorpusError,
    PipelineError,
    EvalError,
    CheckpointError,
    EmbeddingFileError,
    TrainError,
    FileNotFoundError,
)


class UsageError(ValueError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _load_records(path):
    if path is None:
        return None
    _, records = load_embedding_file(path)
    return records


def _parse_oracle(text: str | None) -> OracleMask:
    if not text:
        return OracleMask()
    if text == "all":
        return OracleMask.all_on()
    flags = {"carryover": False, "type": False, "span": False}
    for part in text.split(","):
        part = part.strip()
        if part not in flags:
            raise UsageError(f"unknown oracle stage {part!r}")
        flags[part] = True
    return OracleMask(**flags)


def _write_json(path, payload) -> None:
    Path(path).write_text(
        json.dumps(payload, sort_keys=True, indent=1) + "\n", encoding="utf-8"
    )


# ---------------------------------------------------------------------------
# Subcommands


def cmd_train(args) -> int:
    schema = load_schema(args.schema)
    train_corpus = load_corpus(args.train, schema)
    dev_corpus = load_corpus(args.dev, schema)
    ontology = load_ontology(args.ontology, schema) if args.ontology else None
    records = _load_records(args.embedding_file)
    config = TrainConfig(
        model=args.model,
        seed=args.seed,
        learning_rate=args.lr,
        batch_size=args.batch_size,
        patience=args.patience,
        max_epochs=args.max_epochs,
        embed_mode=args.embed_mode,
        embed_dim=args.embed_dim,
        affine_dim=args.affine_dim,
        hidden_dim=args.hidden_dim,
    )
    result = train(config, train_corpus, dev_corpus, schema, ontology=ontology, records=records)
    result.model.save(args.out)
    if args.log:
        write_training_log(args.log, result.log)
    print(
        f"trained {args.model}: {len(result.log)} epochs, "
        f"best dev loss {result.best_dev_loss:.6f} at epoch {result.best_epoch}"
    )
    return 0


def _load_tracker(args) -> SingleTracker:
    return SingleTracker(
        carryover_model=load_model(args.carryover) if args.carryover else None,
        type_model=load_model(args.type) if args.type else None,
        span_model=load_model(args.span) if args.span else None,
    )


def cmd_predict(args) -> int:
    schema = load_schema(args.schema)
    corpus = load_corpus(args.corpus, schema)
    records = _load_records(args.embedding_file)
    mask = _parse_oracle(args.oracle)
    if args.jst:
        if args.carryover or args.type or args.span:
            raise UsageError("--jst cannot be combined with the rc checkpoints")
        if mask.any_on:
            raise UsageError("oracle stages do not apply to the jst baseline")
        preds = jst_track_corpus(corpus, load_model(args.jst), schema, records=records)
    else:
        scorer = _load_tracker(args)
        preds = track_corpus(
            corpus,
            scorer,
            schema,
            mask=mask,
            records=records,
            use_gold_prev=args.gold_prev,
            threshold=args.threshold,
            max_span_len=args.max_span_len,
        )
    write_predictions(args.out, preds)
    print(f"wrote {len(preds)} turn predictions to {args.out}")
    return 0


def cmd_eval(args) -> int:
    schema = load_schema(args.schema)
    corpus = load_corpus(args.gold, schema)
    preds = read_predictions(args.pred)
    report = compute_report(preds, corpus, schema)
    print(report.render())
    if args.report:
        _write_json(args.report, report.to_json_dict())
    return 0


def cmd_analyze(args) -> int:
    schema = load_schema(args.schema)
    corpus = load_corpus(args.gold, schema)
    preds = read_predictions(args.pred)
    report = compute_report(preds, corpus, schema)
    lines = ["depth  turns  % incorrect"]
    for d, row in report.depth.items():
        lines.append(f"  {d:>3}  {row.total:>5}  {row.pct_incorrect:>10.2f}")
    lines.append("")
    lines.append("error category breakdown")
    pcts = report.errors.percentages
    for cat in evaluation.ERROR_CATEGORIES:
        lines.append(f"  {cat:<24} {report.errors.counts[cat]:>6}  {pcts[cat]:>6.1f}%")
    print("\n".join(lines))
    if args.report:
        _write_json(args.report, report.to_json_dict())
    return 0


def _train_three(args, schema, train_corpus, dev_corpus, embed_mode, records):
    models = {}
    for kind in ("carryover", "type", "span"):
        config = TrainConfig(
            model=kind,
            seed=args.seed,
            learning_rate=args.lr,
            batch_size=args.batch_size,
            patience=args.patience,
            max_epochs=args.max_epochs,
            embed_mode=embed_mode,
            embed_dim=args.embed_dim,
            affine_dim=args.affine_dim,
            hidden_dim=args.hidden_dim,
        )
        models[kind] = train(
            config, train_corpus, dev_corpus, schema, records=records
        ).model
    return SingleTracker(models["carryover"], models["type"], models["span"])


def cmd_ablate(args) -> int:
    schema = load_schema(args.schema)
    train_corpus = load_corpus(args.train, schema)
    dev_corpus = load_corpus(args.dev, schema)
    records = _load_records(args.embedding_file)
    base_mode = EMBED_PRETRAINED if records is not None else EMBED_TRAINABLE
    scorer = _train_three(args, schema, train_corpus, dev_corpus, base_mode, records)

    def dev_jga(mask: OracleMask, use_scorer=scorer, use_records=records) -> float:
        preds = [
            tp.record
            for tp in track_corpus(
                dev_corpus, use_scorer, schema, mask=mask, records=use_records
            )
        ]
        gold = {
            (d.id, t): d.turns[t - 1].state
            for d in dev_corpus
            for t in range(1, d.n_turns + 1)
        }
        return evaluation.joint_goal_accuracy(preds, gold, schema)

    rows: list[tuple[str, float]] = []
    rows.append(("oracle all stages", dev_jga(OracleMask.all_on())))
    base = dev_jga(OracleMask())
    rows.append(("base pipeline", base))
    if base_mode == EMBED_PRETRAINED:
        plain = _train_three(args, schema, train_corpus, dev_corpus, EMBED_TRAINABLE, None)
        rows.append(("- pretrained embeddings", dev_jga(OracleMask(), plain, None)))
    rows.append(("+ oracle type", dev_jga(OracleMask(type=True))))
    rows.append(("+ oracle span", dev_jga(OracleMask(span=True))))
    rows.append(("+ oracle carryover", dev_jga(OracleMask(carryover=True))))

    coverage = derivability(dev_corpus, schema).coverage
    width = max(len(name) for name, _ in rows)
    print(f"{'variant':<{width}}  dev joint goal")
    for name, value in rows:
        print(f"{name:<{width}}  {100.0 * value:.2f}%")
    print(f"(derivability coverage of the dev set: {100.0 * coverage:.2f}%)")
    if args.report:
        _write_json(
            args.report,
            {"rows": {name: value for name, value in rows}, "derivability": coverage},
        )
    if args.out_dir:
        out = Path(args.out_dir)
        out.mkdir(parents=True, exist_ok=True)
        scorer.carryover_model.save(out / "carryover.ckpt")
        scorer.type_model.save(out / "type.ckpt")
        scorer.span_model.save(out / "span.ckpt")
    return 0


def cmd_combine(args) -> int:
    schema = load_schema(args.schema)
    dev_corpus = load_corpus(args.dev_gold, schema)
    gold = {
        (d.id, t): d.turns[t - 1].state
        for d in dev_corpus
        for t in range(1, d.n_turns + 1)
    }
    rc_dev = read_predictions(args.rc_dev)
    jst_dev = read_predictions(args.jst_dev)
    rc_acc = per_slot_accuracy(rc_dev, gold, schema)
    jst_acc = per_slot_accuracy(jst_dev, gold, schema)
    combined = hybrid_combine(
        read_predictions(args.rc_test), read_predictions(args.jst_test), rc_acc, jst_acc
    )
    write_predictions(args.out, combined)
    chosen = sum(1 for s in schema.ids if jst_acc.get(s, 0.0) > rc_acc.get(s, 0.0))
    print(
        f"wrote {len(combined)} combined turns to {args.out} "
        f"({chosen}/{schema.size} slots taken from the closed-vocab side)"
    )
    return 0


def cmd_ensemble(args) -> int:
    schema = load_schema(args.schema)
    corpus = load_corpus(args.corpus, schema)
    records = _load_records(args.embedding_file)
    members = []
    for triple in args.member:
        parts = triple.split(",")
        if len(parts) != 3:
            raise UsageError("--member needs carryover,type,span checkpoint paths")
        members.append(
            SingleTracker(load_model(parts[0]), load_model(parts[1]), load_model(parts[2]))
        )
    scorer = EnsembleTracker(members)
    preds = track_corpus(
        corpus,
        scorer,
        schema,
        mask=_parse_oracle(args.oracle),
        records=records,
        threshold=args.threshold,
        max_span_len=args.max_span_len,
    )
    write_predictions(args.out, preds)
    print(f"wrote {len(preds)} ensemble predictions ({len(members)} members) to {args.out}")
    return 0


def cmd_validate(args) -> int:
    schema = load_schema(args.schema)
    corpus = load_corpus(args.corpus, schema)
    if args.ontology:
        load_ontology(args.ontology, schema)
    examples = build_examples(corpus, schema)
    counts = summarize_examples(examples)
    coverage = derivability(corpus, schema)
    n_turns = sum(d.n_turns for d in corpus)
    print(f"dialogs: {len(corpus)}")
    print(f"turns: {n_turns}")
    print(f"slots: {schema.size}")
    for key in sorted(counts):
        print(f"examples[{key}]: {counts[key]}")
    print(f"derivability coverage: {100.0 * coverage.coverage:.2f}%")
    return 0


# ---------------------------------------------------------------------------
# Parser


def _add_train_knobs(p) -> None:
    p.add_argument("--lr", type=float, default=0.001)
    p.add_argument("--batch-size", type=int, default=32)
    p.add_argument("--patience", type=int, default=10)
    p.add_argument("--max-epochs", type=int, default=200)
    p.add_argument("--embed-dim", type=int, default=100)
    p.add_argument("--affine-dim", type=int, default=200)
    p.add_argument("--hidden-dim", type=int, default=50)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="dstreader", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train one model")
    p.add_argument("--model", required=True, choices=MODEL_KINDS)
    p.add_argument("--train", required=True)
    p.add_argument("--dev", required=True)
    p.add_argument("--schema", required=True)
    p.add_argument("--ontology")
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--log")
    p.add_argument("--embed-mode", choices=[EMBED_TRAINABLE, EMBED_PRETRAINED],
                   default=EMBED_TRAINABLE)
    p.add_argument("--embedding-file")
    _add_train_knobs(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("predict", help="run the tracker over a corpus")
    p.add_argument("--corpus", required=True)
    p.add_argument("--schema", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--carryover")
    p.add_argument("--type")
    p.add_argument("--span")
    p.add_argument("--jst")
    p.add_argument("--oracle", help="comma-separated stages or 'all'")
    p.add_argument("--embedding-file")
    p.add_argument("--threshold", type=float, default=0.5)
    p.add_argument("--max-span-len", type=int, default=None)
    p.add_argument("--gold-prev", action="store_true",
                   help="feed gold previous states (diagnostic)")
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("eval", help="score a prediction file")
    p.add_argument("--pred", required=True)
    p.add_argument("--gold", required=True)
    p.add_argument("--schema", required=True)
    p.add_argument("--report")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("analyze", help="depth and error-category analysis")
    p.add_argument("--pred", required=True)
    p.add_argument("--gold", required=True)
    p.add_argument("--schema", required=True)
    p.add_argument("--report")
    p.set_defaults(func=cmd_analyze)

    p = sub.add_parser("ablate", help="train and run the oracle/embedding grid")
    p.add_argument("--train", required=True)
    p.add_argument("--dev", required=True)
    p.add_argument("--schema", required=True)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--embedding-file")
    p.add_argument("--out-dir")
    p.add_argument("--report")
    _add_train_knobs(p)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("combine", help="per-slot hybrid of rc and jst predictions")
    p.add_argument("--rc-test", required=True)
    p.add_argument("--jst-test", required=True)
    p.add_argument("--rc-dev", required=True)
    p.add_argument("--jst-dev", required=True)
    p.add_argument("--dev-gold", required=True)
    p.add_argument("--schema", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_combine)

    p = sub.add_parser("ensemble", help="probability-averaged ensemble prediction")
    p.add_argument("--corpus", required=True)
    p.add_argument("--schema", required=True)
    p.add_argument("--member", action="append", required=True,
                   help="carryover,type,span checkpoint triple; repeatable")
    p.add_argument("--out", required=True)
    p.add_argument("--oracle")
    p.add_argument("--embedding-file")
    p.add_argument("--threshold", type=float, default=0.5)
    p.add_argument("--max-span-len", type=int, default=None)
    p.set_defaults(func=cmd_ensemble)

    p = sub.add_parser("validate-corpus", help="check corpus files and print stats")
    p.add_argument("--corpus", required=True)
    p.add_argument("--schema", required=True)
    p.add_argument("--ontology")
    p.set_defaults(func=cmd_validate)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args) or 0
    except UsageError as e:
        print(f"usage error: {e}", file=sys.stderr)
        return 1
    except DATA_ERRORS as e:
        print(f"data error: {e}", file=sys.stderr)
        return 2
    except SystemExit as e:  # argparse -h
        return int(e.code or 0)
    except Exception as e:  # noqa: BLE001 - one-line diagnostic, nonzero exit
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
