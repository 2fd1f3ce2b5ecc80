"""Turn-level inference: three sequential decisions per slot, dialog
rollouts, oracle substitution, ensembling, and the per-slot hybrid combiner.

Per slot and turn: the carryover stage decides keep vs change; on change the
type stage picks yes / no / dontcare / span; span-typed values are decoded
from the token stream.  Dialog rollouts feed each turn the *predicted*
previous state, so early mistakes can persist.  Any stage can be replaced by
its oracle; an oracle span that cannot be located in the context yields a
reserved sentinel that never matches gold.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import heads
from .corpus import (
    DONTCARE,
    TYPE_CLASSES,
    TYPE_DONTCARE,
    TYPE_NO,
    TYPE_SPAN,
    TYPE_YES,
    UNANSWERABLE_SENTINEL,
    Dialog,
    FlattenedDialog,
    Schema,
    derive_type_label,
    detokenize,
    empty_state,
    find_gold_span,
    flatten,
    normalize_value,
    values_equal,
)

PROV_CARRIED = "carried"
PROV_SPAN = "span"
PROV_JST = "jst"
PROV_ORACLE = "oracle"
# yes/no/dontcare answers are tagged with the type class itself.


class PipelineError(ValueError):
    pass


@dataclass(frozen=True)
class OracleMask:
    carryover: bool = False
    type: bool = False
    span: bool = False

    @property
    def any_on(self) -> bool:
        return self.carryover or self.type or self.span

    @classmethod
    def all_on(cls) -> "OracleMask":
        return cls(True, True, True)


@dataclass
class SlotDecision:
    change_prob: float | None
    changed: bool
    type_dist: np.ndarray | None
    span: tuple[int, int] | None
    value: str | None
    provenance: str


@dataclass
class PredictionRecord:
    dialog_id: str
    turn_index: int
    state: dict[str, str | None]
    provenance: dict[str, str]


@dataclass
class TurnPrediction:
    dialog_id: str
    turn_index: int
    state: dict[str, str | None]
    decisions: dict[str, SlotDecision]

    @property
    def record(self) -> PredictionRecord:
        return PredictionRecord(
            self.dialog_id,
            self.turn_index,
            dict(self.state),
            {slot: d.provenance for slot, d in self.decisions.items()},
        )


# ---------------------------------------------------------------------------
# Scorers


class SingleTracker:
    """One carryover + type + span model triple."""

    def __init__(self, carryover_model=None, type_model=None, span_model=None):
        self.carryover_model = carryover_model
        self.type_model = type_model
        self.span_model = span_model
        for m in (carryover_model, type_model, span_model):
            if m is not None:
                self.schema = m.schema
                break
        else:
            raise PipelineError("tracker needs at least one model")

    def change_probs(self, flat, records=None) -> np.ndarray:
        if self.carryover_model is None:
            raise PipelineError("no carryover model available")
        return self.carryover_model.change_probs(flat, records)

    def type_dist(self, flat, slot_idx, records=None) -> np.ndarray:
        if self.type_model is None:
            raise PipelineError("no type model available")
        return self.type_model.type_dist(flat, slot_idx, records)

    def span_dists(self, flat, slot_idx, records=None):
        if self.span_model is None:
            raise PipelineError("no span model available")
        return self.span_model.span_dists(flat, slot_idx, records)


class EnsembleTracker:
    """Averages member probabilities before the sequential decoding.

    The mean is computed as ``p0 + sum(pk - p0)/K`` so an ensemble of
    identical members reproduces the single model bit-exactly.
    """

    def __init__(self, members: list[SingleTracker]):
        if not members:
            raise PipelineError("ensemble needs at least one member")
        ids = {tuple(m.schema.ids) for m in members}
        if len(ids) > 1:
            raise PipelineError("ensemble members disagree on the slot schema")
        self.members = members
        self.schema = members[0].schema

    @staticmethod
    def _mean(values: list[np.ndarray]) -> np.ndarray:
        base = values[0]
        if len(values) == 1:
            return base.copy()
        acc = np.zeros_like(base)
        for v in values[1:]:
            acc += v - base
        return base + acc / len(values)

    def change_probs(self, flat, records=None) -> np.ndarray:
        return self._mean([m.change_probs(flat, records) for m in self.members])

    def type_dist(self, flat, slot_idx, records=None) -> np.ndarray:
        return self._mean([m.type_dist(flat, slot_idx, records) for m in self.members])

    def span_dists(self, flat, slot_idx, records=None):
        pairs = [m.span_dists(flat, slot_idx, records) for m in self.members]
        lengths = {p[0].shape[0] for p in pairs}
        if len(lengths) > 1:
            raise PipelineError("ensemble members disagree on sequence length")
        return (
            self._mean([p[0] for p in pairs]),
            self._mean([p[1] for p in pairs]),
        )


# ---------------------------------------------------------------------------
# Sequential per-turn prediction


def _decode_value(flat: FlattenedDialog, span: tuple[int, int]) -> str:
    i, j = span
    return normalize_value(detokenize(flat.tokens[i : j + 1]))


def predict_turn(
    prev_state: dict[str, str | None],
    flat: FlattenedDialog,
    scorer,
    schema: Schema,
    mask: OracleMask = OracleMask(),
    gold_state: dict[str, str | None] | None = None,
    records=None,
    threshold: float = 0.5,
    max_span_len: int | None = None,
) -> TurnPrediction:
    """One turn of sequential decisions for every slot."""
    if mask.any_on and gold_state is None:
        raise PipelineError("oracle stages need the gold state")
    probs = None
    if not mask.carryover:
        probs = scorer.change_probs(flat, records)
    marker_mask = np.array([flat.is_marker(i) for i in range(flat.length)])

    state: dict[str, str | None] = {}
    decisions: dict[str, SlotDecision] = {}
    for slot_idx, slot in enumerate(schema.ids):
        prev_value = prev_state.get(slot)
        change_prob = None
        if mask.carryover:
            changed = not values_equal(prev_value, gold_state.get(slot))
        else:
            change_prob = float(probs[slot_idx])
            changed = change_prob >= threshold

        type_dist = None
        span = None
        if not changed:
            value = prev_value
            provenance = PROV_CARRIED
        else:
            if mask.type:
                gold_value = gold_state.get(slot)
                if gold_value is None:
                    type_label, value, provenance = None, None, PROV_ORACLE
                else:
                    type_label = derive_type_label(gold_value)
                    value, provenance = None, PROV_ORACLE
            else:
                type_dist = scorer.type_dist(flat, slot_idx, records)
                type_label = TYPE_CLASSES[int(np.argmax(type_dist))]
                value, provenance = None, type_label

            if type_label == TYPE_YES:
                value = "yes"
            elif type_label == TYPE_NO:
                value = "no"
            elif type_label == TYPE_DONTCARE:
                value = DONTCARE
            elif type_label == TYPE_SPAN:
                if mask.span:
                    gold_value = gold_state.get(slot)
                    if gold_value is not None and find_gold_span(
                        flat, normalize_value(gold_value)
                    ):
                        value = normalize_value(gold_value)
                    else:
                        value = UNANSWERABLE_SENTINEL
                    provenance = PROV_ORACLE
                else:
                    p_start, p_end = scorer.span_dists(flat, slot_idx, records)
                    span = heads.decode_span_avoiding(p_start, p_end, marker_mask, max_span_len)
                    value = _decode_value(flat, span)
                    provenance = PROV_SPAN

        state[slot] = value
        decisions[slot] = SlotDecision(change_prob, changed, type_dist, span, value, provenance)
    return TurnPrediction(flat.dialog_id, flat.turn_index, state, decisions)


def track_dialog(
    dialog: Dialog,
    scorer,
    schema: Schema,
    mask: OracleMask = OracleMask(),
    records=None,
    use_gold_prev: bool = False,
    threshold: float = 0.5,
    max_span_len: int | None = None,
) -> list[TurnPrediction]:
    """Roll a dialog forward, feeding each turn the predicted previous state
    (or the gold one when ``use_gold_prev`` is set, for diagnosis)."""
    if not dialog.turns:
        raise PipelineError(f"dialog {dialog.id!r} has no turns")
    prev = empty_state(schema)
    out = []
    for t, turn in enumerate(dialog.turns, start=1):
        flat = flatten(dialog, t)
        tp = predict_turn(
            prev,
            flat,
            scorer,
            schema,
            mask=mask,
            gold_state=turn.state if (mask.any_on or use_gold_prev) else None,
            records=records,
            threshold=threshold,
            max_span_len=max_span_len,
        )
        out.append(tp)
        prev = turn.state if use_gold_prev else tp.state
    return out


def track_corpus(corpus, scorer, schema, **kwargs) -> list[TurnPrediction]:
    preds = []
    for dialog in corpus:
        preds.extend(track_dialog(dialog, scorer, schema, **kwargs))
    return preds


def jst_track_corpus(corpus, jst_model, schema, records=None) -> list[TurnPrediction]:
    """Closed-vocab baseline: predicts the full state from scratch each turn."""
    preds = []
    for dialog in corpus:
        for t in range(1, dialog.n_turns + 1):
            flat = flatten(dialog, t)
            state = jst_model.predict_state(flat, records)
            decisions = {
                slot: SlotDecision(None, True, None, None, state[slot], PROV_JST)
                for slot in schema.ids
            }
            preds.append(TurnPrediction(dialog.id, t, state, decisions))
    return preds


# ---------------------------------------------------------------------------
# Hybrid combination


def hybrid_combine(
    rc_preds: list[PredictionRecord],
    jst_preds: list[PredictionRecord],
    rc_dev_acc: dict[str, float],
    jst_dev_acc: dict[str, float],
) -> list[PredictionRecord]:
    """Per-slot system selection by development-set accuracy; ties go to the
    reading-comprehension side."""
    jst_by_turn = {(p.dialog_id, p.turn_index): p for p in jst_preds}
    rc_keys = {(p.dialog_id, p.turn_index) for p in rc_preds}
    if rc_keys != set(jst_by_turn):
        raise PipelineError("prediction sets cover different turns")
    slots = set(rc_dev_acc) | set(jst_dev_acc)
    use_jst = {
        slot: jst_dev_acc.get(slot, 0.0) > rc_dev_acc.get(slot, 0.0) for slot in slots
    }
    combined = []
    for rc in rc_preds:
        other = jst_by_turn[(rc.dialog_id, rc.turn_index)]
        state = {}
        provenance = {}
        for slot in rc.state:
            source = other if use_jst.get(slot, False) else rc
            state[slot] = source.state.get(slot)
            provenance[slot] = source.provenance.get(slot, PROV_JST)
        combined.append(PredictionRecord(rc.dialog_id, rc.turn_index, state, provenance))
    return combined


# ---------------------------------------------------------------------------
# Prediction files (one JSON object per line)


def write_predictions(path, preds) -> None:
    records = [p.record if isinstance(p, TurnPrediction) else p for p in preds]
    with Path(path).open("w", encoding="utf-8") as f:
        for r in records:
            f.write(
                json.dumps(
                    {
                        "dialog_id": r.dialog_id,
                        "turn_index": r.turn_index,
                        "state": r.state,
                        "provenance": r.provenance,
                    },
                    sort_keys=True,
                )
                + "\n"
            )


def read_predictions(path) -> list[PredictionRecord]:
    records = []
    with Path(path).open("r", encoding="utf-8") as f:
        for line_no, line in enumerate(f, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as e:
                raise PipelineError(f"{path}: line {line_no}: {e.msg}") from e
            try:
                records.append(
                    PredictionRecord(
                        obj["dialog_id"], obj["turn_index"], obj["state"], obj["provenance"]
                    )
                )
            except KeyError as e:
                raise PipelineError(f"{path}: line {line_no}: missing field {e}") from e
    return records
