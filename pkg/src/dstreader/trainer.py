"""Independent training loops for the four models.

Defaults follow the recipe the whole system is tuned around: Adam at
learning rate 0.001, batch size 32, and early stopping once the development
loss has not decreased for ten consecutive epochs.  The checkpoint returned
is the best dev-loss snapshot, not the last epoch.

Loss definitions:
  carryover  mean binary cross-entropy over all M slots of a turn
  type       cross-entropy over the four value-type classes
  span       sum of the start and end position cross-entropies
  jst        per-slot cross-entropy summed over slots
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .corpus import (
    CARRYOVER_CHANGE,
    TYPE_CLASSES,
    TYPE_SPAN,
    Dialog,
    Schema,
    build_examples,
    flatten,
    normalize_value,
)
from .encoder import EMBED_PRETRAINED, EMBED_TRAINABLE, EncoderConfig, Vocabulary
from .models import (
    KIND_CARRYOVER,
    KIND_JST,
    KIND_SPAN,
    KIND_TYPE,
    MODEL_KINDS,
    CarryoverBatch,
    CarryoverModel,
    JstBatch,
    JstModel,
    SpanBatch,
    SpanModel,
    TypeBatch,
    TypeModel,
    gold_class_targets,
)
from .nncore import Adam


class TrainError(ValueError):
    pass


@dataclass
class TrainConfig:
    model: str
    seed: int
    learning_rate: float = 0.001
    batch_size: int = 32
    patience: int = 10
    max_epochs: int = 200
    embed_mode: str = EMBED_TRAINABLE
    embed_dim: int = 100
    affine_dim: int = 200
    hidden_dim: int = 50

    def __post_init__(self):
        if self.model not in MODEL_KINDS:
            raise TrainError(f"unknown model kind {self.model!r}")
        if self.learning_rate <= 0 or self.batch_size <= 0 or self.max_epochs <= 0:
            raise TrainError("hyperparameters must be positive")
        if self.patience < 1:
            raise TrainError("patience must be >= 1")
        if self.embed_mode not in (EMBED_TRAINABLE, EMBED_PRETRAINED):
            raise TrainError(f"unknown embedding mode {self.embed_mode!r}")


class EarlyStopper:
    """Stop once the watched loss has not strictly decreased for
    ``patience`` consecutive updates."""

    def __init__(self, patience: int):
        self.patience = patience
        self.best = float("inf")
        self.since_improvement = 0

    def update(self, loss: float) -> bool:
        if loss < self.best:
            self.best = loss
            self.since_improvement = 0
            return True
        self.since_improvement += 1
        return False

    @property
    def should_stop(self) -> bool:
        return self.since_improvement >= self.patience


# ---------------------------------------------------------------------------
# Datasets


@dataclass
class _Dataset:
    kind: str
    flats: list
    flat_idx: np.ndarray
    slot_idx: np.ndarray | None = None
    labels: np.ndarray | None = None
    starts: np.ndarray | None = None
    ends: np.ndarray | None = None
    targets: np.ndarray | None = None

    @property
    def n(self) -> int:
        return int(self.flat_idx.shape[0])

    def batch(self, idxs: np.ndarray):
        flats = [self.flats[i] for i in self.flat_idx[idxs]]
        if self.kind == KIND_CARRYOVER:
            return CarryoverBatch(flats, self.labels[idxs])
        if self.kind == KIND_TYPE:
            return TypeBatch(flats, self.slot_idx[idxs], self.labels[idxs])
        if self.kind == KIND_SPAN:
            return SpanBatch(flats, self.slot_idx[idxs], self.starts[idxs], self.ends[idxs])
        return JstBatch(flats, self.targets[idxs])


def build_dataset(
    kind: str,
    corpus: list[Dialog],
    schema: Schema,
    jst_model: JstModel | None = None,
) -> _Dataset:
    """Select and label the training items a model kind actually uses."""
    flats = []
    flat_pos: dict[tuple[str, int], int] = {}
    for dialog in corpus:
        for t in range(1, dialog.n_turns + 1):
            flat_pos[(dialog.id, t)] = len(flats)
            flats.append(flatten(dialog, t))

    examples = build_examples(corpus, schema)
    if kind == KIND_CARRYOVER:
        labels = np.zeros((len(flats), schema.size))
        for ex in examples:
            if ex.carryover == CARRYOVER_CHANGE:
                labels[flat_pos[(ex.dialog_id, ex.turn_index)], schema.index(ex.slot)] = 1.0
        return _Dataset(kind, flats, np.arange(len(flats)), labels=labels)

    if kind == KIND_TYPE:
        rows = [ex for ex in examples if ex.type_label is not None]
        return _Dataset(
            kind,
            flats,
            np.array([flat_pos[(ex.dialog_id, ex.turn_index)] for ex in rows], dtype=np.int64),
            slot_idx=np.array([schema.index(ex.slot) for ex in rows], dtype=np.int64),
            labels=np.array([TYPE_CLASSES.index(ex.type_label) for ex in rows], dtype=np.int64),
        )

    if kind == KIND_SPAN:
        rows = [ex for ex in examples if ex.type_label == TYPE_SPAN and ex.answerable]
        return _Dataset(
            kind,
            flats,
            np.array([flat_pos[(ex.dialog_id, ex.turn_index)] for ex in rows], dtype=np.int64),
            slot_idx=np.array([schema.index(ex.slot) for ex in rows], dtype=np.int64),
            starts=np.array([ex.span[0] for ex in rows], dtype=np.int64),
            ends=np.array([ex.span[1] for ex in rows], dtype=np.int64),
        )

    if kind == KIND_JST:
        if jst_model is None:
            raise TrainError("jst dataset needs the model for its class lists")
        targets = np.stack(
            [
                gold_class_targets(jst_model, dialog.turns[t - 1].state)
                for dialog in corpus
                for t in range(1, dialog.n_turns + 1)
            ]
        )
        return _Dataset(kind, flats, np.arange(len(flats)), targets=targets)

    raise TrainError(f"unknown model kind {kind!r}")


# ---------------------------------------------------------------------------
# Training


@dataclass
class TrainResult:
    model: object
    log: list[dict] = field(default_factory=list)
    best_epoch: int = 0
    best_dev_loss: float = float("inf")


def _make_model(config: TrainConfig, schema, vocab, ontology, pretrained_dim, rng):
    enc_config = EncoderConfig(
        embed_mode=config.embed_mode,
        embed_dim=config.embed_dim,
        pretrained_dim=pretrained_dim,
        affine_dim=config.affine_dim,
        hidden_dim=config.hidden_dim,
    )
    if config.model == KIND_CARRYOVER:
        return CarryoverModel(schema, enc_config, rng, vocab)
    if config.model == KIND_TYPE:
        return TypeModel(schema, enc_config, rng, vocab)
    if config.model == KIND_SPAN:
        return SpanModel(schema, enc_config, rng, vocab)
    if ontology is None:
        raise TrainError("jst training needs an ontology")
    return JstModel(schema, enc_config, rng, vocab, ontology=ontology)


def _epoch_loss(model, dataset: _Dataset, records, batch_size: int) -> float:
    total, count = 0.0, 0
    for lo in range(0, dataset.n, batch_size):
        idxs = np.arange(lo, min(lo + batch_size, dataset.n))
        loss = model.loss(dataset.batch(idxs), records=records, compute_grad=False)
        total += loss * idxs.size
        count += idxs.size
    return total / count


def train(
    config: TrainConfig,
    train_corpus: list[Dialog],
    dev_corpus: list[Dialog],
    schema: Schema,
    ontology: dict[str, list[str]] | None = None,
    records: dict[str, np.ndarray] | None = None,
) -> TrainResult:
    """Train one model; returns the best-dev-loss checkpoint and the log."""
    rng = np.random.default_rng(config.seed)
    pretrained_dim = None
    vocab = None
    if config.embed_mode == EMBED_PRETRAINED:
        if records is None:
            raise TrainError("pretrained mode needs an embedding record map")
        pretrained_dim = next(iter(records.values())).shape[1] if records else None
        if pretrained_dim is None:
            raise TrainError("embedding record map is empty")
    else:
        vocab = Vocabulary.build(
            [flatten(d, t) for d in train_corpus for t in range(1, d.n_turns + 1)]
        )
    model = _make_model(config, schema, vocab, ontology, pretrained_dim, rng)

    jst_model = model if config.model == KIND_JST else None
    train_ds = build_dataset(config.model, train_corpus, schema, jst_model)
    dev_ds = build_dataset(config.model, dev_corpus, schema, jst_model)
    if train_ds.n == 0:
        raise TrainError(f"no training items for model kind {config.model!r}")
    if dev_ds.n == 0:
        raise TrainError(f"no dev items for model kind {config.model!r}")

    adam = Adam(model.parameters(), lr=config.learning_rate)
    stopper = EarlyStopper(config.patience)
    result = TrainResult(model)
    snapshot = None

    for epoch in range(1, config.max_epochs + 1):
        t0 = time.perf_counter()
        perm = rng.permutation(train_ds.n)
        total, count = 0.0, 0
        for lo in range(0, train_ds.n, config.batch_size):
            idxs = perm[lo : lo + config.batch_size]
            model.zero_grads()
            loss = model.loss(train_ds.batch(idxs), records=records, compute_grad=True)
            adam.step()
            total += loss * idxs.size
            count += idxs.size
        train_loss = total / count
        dev_loss = _epoch_loss(model, dev_ds, records, config.batch_size)
        result.log.append(
            {
                "epoch": epoch,
                "train_loss": train_loss,
                "dev_loss": dev_loss,
                "elapsed": time.perf_counter() - t0,
            }
        )
        if stopper.update(dev_loss):
            snapshot = [p.value.copy() for p in model.parameters()]
            result.best_epoch = epoch
            result.best_dev_loss = dev_loss
        if stopper.should_stop:
            break

    if snapshot is not None:
        for p, value in zip(model.parameters(), snapshot):
            p.value = value
            p.grad = np.zeros_like(value)
    return result


def write_training_log(path, log: list[dict]) -> None:
    Path(path).write_text(
        "".join(json.dumps(entry, sort_keys=True) + "\n" for entry in log),
        encoding="utf-8",
    )
