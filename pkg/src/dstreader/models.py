"""The four trainable models: carryover, type, span, and the closed-vocab
baseline.  Each owns its own encoder instance (no parameter sharing) plus a
head, exposes a batched loss with exact gradients, single-example scoring
for inference, and checkpoint persistence (binary parameter table plus a
JSON sidecar describing how to rebuild the model)."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import heads, jst
from .corpus import (
    DONTCARE,
    TYPE_CLASSES,
    FlattenedDialog,
    Schema,
    SlotId,
    normalize_value,
)
from .encoder import (
    EMBED_PRETRAINED,
    EMBED_TRAINABLE,
    Encoder,
    EncoderConfig,
    Vocabulary,
)
from .nncore import (
    CheckpointError,
    Parameter,
    load_checkpoint,
    load_into,
    save_checkpoint,
    sigmoid_bce_loss,
    softmax_ce_batch,
    zero_grads,
)

META_SUFFIX = ".meta.json"
META_FORMAT = 1

KIND_CARRYOVER = "carryover"
KIND_TYPE = "type"
KIND_SPAN = "span"
KIND_JST = "jst"
MODEL_KINDS = (KIND_CARRYOVER, KIND_TYPE, KIND_SPAN, KIND_JST)


@dataclass
class CarryoverBatch:
    flats: list[FlattenedDialog]
    labels: np.ndarray  # (B, M) 0/1 change bits


@dataclass
class TypeBatch:
    flats: list[FlattenedDialog]
    slot_idx: np.ndarray  # (B,)
    labels: np.ndarray  # (B,) indices into TYPE_CLASSES


@dataclass
class SpanBatch:
    flats: list[FlattenedDialog]
    slot_idx: np.ndarray  # (B,)
    starts: np.ndarray  # (B,)
    ends: np.ndarray  # (B,)


@dataclass
class JstBatch:
    flats: list[FlattenedDialog]
    targets: np.ndarray  # (B, n_slots), -1 marks values outside the class list


def _valid_mask(lengths: np.ndarray, Lmax: int) -> np.ndarray:
    return np.arange(Lmax)[None, :] < lengths[:, None]


class _ModelBase:
    kind: str = ""

    def __init__(self, schema: Schema, config: EncoderConfig):
        self.schema = schema
        self.config = config
        self.vocab: Vocabulary | None = None
        self.encoder: Encoder | None = None

    def parameters(self) -> list[Parameter]:
        raise NotImplementedError

    def zero_grads(self) -> None:
        zero_grads(self.parameters())

    def _encode(self, flats, records):
        return self.encoder.forward(flats, records)

    # -- persistence -------------------------------------------------------

    def _meta(self) -> dict:
        cfg = self.config
        return {
            "format": META_FORMAT,
            "kind": self.kind,
            "encoder": {
                "embed_mode": cfg.embed_mode,
                "embed_dim": cfg.embed_dim,
                "pretrained_dim": cfg.pretrained_dim,
                "affine_dim": cfg.affine_dim,
                "hidden_dim": cfg.hidden_dim,
            },
            "slots": self.schema.ids,
            "vocab": self.vocab.tokens if self.vocab is not None else None,
        }

    def save(self, path) -> None:
        save_checkpoint(path, self.parameters())
        meta_path = Path(str(path) + META_SUFFIX)
        meta_path.write_text(
            json.dumps(self._meta(), sort_keys=True, indent=1) + "\n", encoding="utf-8"
        )


class CarryoverModel(_ModelBase):
    """Jointly predicts, for every slot, whether its value changed."""

    kind = KIND_CARRYOVER

    def __init__(
        self,
        schema: Schema,
        config: EncoderConfig,
        rng: np.random.Generator,
        vocab: Vocabulary | None = None,
    ):
        super().__init__(schema, config)
        self.vocab = vocab
        self.encoder = Encoder(config, rng, vocab=vocab, with_questions=False)
        self.head = heads.CarryoverHead(config.enc_dim, schema.size, rng)

    def parameters(self) -> list[Parameter]:
        return self.encoder.parameters() + self.head.parameters()

    def loss(self, batch: CarryoverBatch, records=None, compute_grad: bool = False) -> float:
        state = self._encode(batch.flats, records)
        logits = state.e @ self.head.W.value
        loss, dlogits = sigmoid_bce_loss(logits, batch.labels)
        if compute_grad:
            self.head.W.grad += state.e.T @ dlogits
            de = dlogits @ self.head.W.value.T
            self.encoder.backward(state, de=de)
        return loss

    def change_probs(self, flat: FlattenedDialog, records=None) -> np.ndarray:
        state = self._encode([flat], records)
        return heads.carryover_probs(state.e[0], self.head.W.value)


class TypeModel(_ModelBase):
    """Classifies a changed slot's value kind: yes, no, dontcare, or span."""

    kind = KIND_TYPE

    def __init__(
        self,
        schema: Schema,
        config: EncoderConfig,
        rng: np.random.Generator,
        vocab: Vocabulary | None = None,
    ):
        super().__init__(schema, config)
        self.vocab = vocab
        self.encoder = Encoder(
            config, rng, vocab=vocab, n_slots=schema.size, with_questions=True
        )
        self.head = heads.TypeHead(config.enc_dim, len(TYPE_CLASSES), rng)

    def parameters(self) -> list[Parameter]:
        return self.encoder.parameters() + self.head.parameters()

    def loss(self, batch: TypeBatch, records=None, compute_grad: bool = False) -> float:
        state = self._encode(batch.flats, records)
        q = self.encoder.questions.value[batch.slot_idx]
        z = np.concatenate([state.e, q], axis=-1)
        logits = z @ self.head.W.value + self.head.b.value
        loss, dlogits = softmax_ce_batch(logits, batch.labels)
        if compute_grad:
            self.head.W.grad += z.T @ dlogits
            self.head.b.grad += dlogits.sum(axis=0)
            dz = dlogits @ self.head.W.value.T
            enc_dim = self.config.enc_dim
            de = dz[:, :enc_dim]
            np.add.at(self.encoder.questions.grad, batch.slot_idx, dz[:, enc_dim:])
            self.encoder.backward(state, de=de)
        return loss

    def type_dist(self, flat: FlattenedDialog, slot_idx: int, records=None) -> np.ndarray:
        state = self._encode([flat], records)
        q = self.encoder.question_vector(slot_idx)
        return heads.type_probs(state.e[0], q, self.head.W.value, self.head.b.value)


class SpanModel(_ModelBase):
    """Points at the start and end tokens of a slot's value."""

    kind = KIND_SPAN

    def __init__(
        self,
        schema: Schema,
        config: EncoderConfig,
        rng: np.random.Generator,
        vocab: Vocabulary | None = None,
    ):
        super().__init__(schema, config)
        self.vocab = vocab
        self.encoder = Encoder(
            config, rng, vocab=vocab, n_slots=schema.size, with_questions=True
        )
        self.head = heads.SpanHead(config.enc_dim, rng)

    def parameters(self) -> list[Parameter]:
        return self.encoder.parameters() + self.head.parameters()

    def _position_logits(self, state, q: np.ndarray, theta: np.ndarray):
        U = q @ theta.T  # row b holds theta @ q_b
        S = np.einsum("bld,bd->bl", state.D, U)
        return S, U

    def _logit_backward(self, state, q, theta_param, dS, U) -> np.ndarray:
        dU = np.einsum("bl,bld->bd", dS, state.D)
        dD = dS[:, :, None] * U[:, None, :]
        theta_param.grad += np.einsum("bd,bk->dk", dU, q)
        dq = dU @ theta_param.value
        return dD, dq

    def loss(self, batch: SpanBatch, records=None, compute_grad: bool = False) -> float:
        state = self._encode(batch.flats, records)
        q = self.encoder.questions.value[batch.slot_idx]
        Lmax = state.D.shape[1]
        mask = _valid_mask(state.lengths, Lmax)
        S_start, U_start = self._position_logits(state, q, self.head.theta_start.value)
        S_end, U_end = self._position_logits(state, q, self.head.theta_end.value)
        loss_s, dS_start = softmax_ce_batch(S_start, batch.starts, mask)
        loss_e, dS_end = softmax_ce_batch(S_end, batch.ends, mask)
        if compute_grad:
            dD_s, dq_s = self._logit_backward(state, q, self.head.theta_start, dS_start, U_start)
            dD_e, dq_e = self._logit_backward(state, q, self.head.theta_end, dS_end, U_end)
            np.add.at(self.encoder.questions.grad, batch.slot_idx, dq_s + dq_e)
            self.encoder.backward(state, dD=dD_s + dD_e)
        return loss_s + loss_e

    def span_dists(
        self, flat: FlattenedDialog, slot_idx: int, records=None
    ) -> tuple[np.ndarray, np.ndarray]:
        state = self._encode([flat], records)
        q = self.encoder.question_vector(slot_idx)
        return heads.span_distributions(
            state.D[0, : flat.length],
            q,
            self.head.theta_start.value,
            self.head.theta_end.value,
        )


class JstModel(_ModelBase):
    """Closed-vocabulary baseline: classifies every slot from e(t) each turn."""

    kind = KIND_JST

    def __init__(
        self,
        schema: Schema,
        config: EncoderConfig,
        rng: np.random.Generator,
        vocab: Vocabulary | None = None,
        ontology: dict[str, list[str]] | None = None,
        classes: dict[str, list[str]] | None = None,
    ):
        super().__init__(schema, config)
        self.vocab = vocab
        self.encoder = Encoder(config, rng, vocab=vocab, with_questions=False)
        if classes is None:
            if ontology is None:
                raise CheckpointError("jst model needs an ontology or class lists")
            classes = {
                slot: jst.build_classes(ontology.get(slot, [])) for slot in schema.ids
            }
        self.head = jst.JstHead(config.enc_dim, classes, schema.ids, rng)

    def parameters(self) -> list[Parameter]:
        return self.encoder.parameters() + self.head.parameters()

    def classes_for(self, slot: str) -> list[str]:
        if slot not in self.head.classes:
            raise KeyError(f"unknown slot {slot!r}")
        return self.head.classes[slot]

    def loss(self, batch: JstBatch, records=None, compute_grad: bool = False) -> float:
        state = self._encode(batch.flats, records)
        B = len(batch.flats)
        total = 0.0
        de = np.zeros_like(state.e) if compute_grad else None
        for s, slot in enumerate(self.schema.ids):
            targets = batch.targets[:, s]
            rows = np.nonzero(targets >= 0)[0]
            if rows.size == 0:
                continue
            W, b = self.head.W[slot], self.head.b[slot]
            e_rows = state.e[rows]
            logits = e_rows @ W.value + b.value
            m = logits.max(axis=-1, keepdims=True)
            expd = np.exp(logits - m)
            probs = expd / expd.sum(axis=-1, keepdims=True)
            picked = probs[np.arange(rows.size), targets[rows]]
            total += float(-np.log(picked).sum() / B)
            if compute_grad:
                dlogits = probs
                dlogits[np.arange(rows.size), targets[rows]] -= 1.0
                dlogits /= B
                W.grad += e_rows.T @ dlogits
                b.grad += dlogits.sum(axis=0)
                de[rows] += dlogits @ W.value.T
        if compute_grad:
            self.encoder.backward(state, de=de)
        return total

    def slot_dist(self, flat: FlattenedDialog, slot: str, records=None) -> np.ndarray:
        classes = self.classes_for(slot)
        state = self._encode([flat], records)
        probs = jst.jst_probs(state.e[0], self.head.W[slot].value, self.head.b[slot].value)
        assert probs.shape == (len(classes),)
        return probs

    def predict_state(self, flat: FlattenedDialog, records=None) -> dict[str, str | None]:
        state = self._encode([flat], records)
        out: dict[str, str | None] = {}
        for slot in self.schema.ids:
            probs = jst.jst_probs(state.e[0], self.head.W[slot].value, self.head.b[slot].value)
            out[slot] = jst.jst_decode(probs, self.head.classes[slot])
        return out

    def _meta(self) -> dict:
        meta = super()._meta()
        meta["classes"] = self.head.classes
        return meta


def gold_class_targets(
    model: JstModel, state: dict[str, str | None]
) -> np.ndarray:
    """Gold class indices for one turn; -1 marks unrepresentable values."""
    targets = np.empty(model.schema.size, dtype=np.int64)
    for s, slot in enumerate(model.schema.ids):
        value = state.get(slot)
        norm = normalize_value(value) if value is not None else None
        targets[s] = jst.class_index(model.head.classes[slot], norm)
    return targets


# ---------------------------------------------------------------------------
# Persistence


def _build_model(meta: dict, rng: np.random.Generator):
    enc = meta["encoder"]
    config = EncoderConfig(
        embed_mode=enc["embed_mode"],
        embed_dim=enc["embed_dim"],
        pretrained_dim=enc["pretrained_dim"],
        affine_dim=enc["affine_dim"],
        hidden_dim=enc["hidden_dim"],
    )
    schema = Schema(tuple(SlotId.parse(s) for s in meta["slots"]))
    vocab = Vocabulary(meta["vocab"]) if meta["vocab"] is not None else None
    kind = meta["kind"]
    if kind == KIND_CARRYOVER:
        return CarryoverModel(schema, config, rng, vocab)
    if kind == KIND_TYPE:
        return TypeModel(schema, config, rng, vocab)
    if kind == KIND_SPAN:
        return SpanModel(schema, config, rng, vocab)
    if kind == KIND_JST:
        return JstModel(schema, config, rng, vocab, classes=meta["classes"])
    raise CheckpointError(f"unknown model kind {kind!r}")


def load_model(path):
    meta_path = Path(str(path) + META_SUFFIX)
    if not meta_path.exists():
        raise CheckpointError(f"missing sidecar {meta_path}")
    meta = json.loads(meta_path.read_text(encoding="utf-8"))
    if meta.get("format") != META_FORMAT:
        raise CheckpointError(f"{meta_path}: unsupported meta format")
    model = _build_model(meta, np.random.default_rng(0))
    load_into(model.parameters(), load_checkpoint(path))
    return model
