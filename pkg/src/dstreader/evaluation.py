"""Metrics and analyses over prediction/gold turn sets.

Joint goal accuracy is the fraction of user turns whose entire predicted
state matches gold exactly (after value normalization).  Beyond that: a
per-slot accuracy table, per-turn carryover accuracy, an error breakdown by
conversation depth, and a four-way taxonomy of erroneous slot values.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from .corpus import (
    Dialog,
    FlattenedDialog,
    Schema,
    UNANSWERABLE_SENTINEL,
    find_gold_span,
    flatten,
    gold_carryover_labels,
    gold_state_index,
    normalize_value,
    tokenize,
    values_equal,
)
from .pipeline import PROV_CARRIED, PROV_JST, PredictionRecord

CAT_UNANSWERABLE_PRED_VALUE = "unanswerable_pred_value"  # hyp has a value, gold is None
CAT_UNANSWERABLE_PRED_NONE = "unanswerable_pred_none"  # hyp is None, gold has a value
CAT_BOUNDARY = "imprecise_boundary"
CAT_RESOLUTION = "imprecise_resolution"
CAT_REFERENCE = "imprecise_reference"
ERROR_CATEGORIES = (
    CAT_UNANSWERABLE_PRED_VALUE,
    CAT_UNANSWERABLE_PRED_NONE,
    CAT_BOUNDARY,
    CAT_RESOLUTION,
    CAT_REFERENCE,
)


class EvalError(ValueError):
    pass


def _aligned(preds: list[PredictionRecord], gold_index) -> None:
    keys = [(p.dialog_id, p.turn_index) for p in preds]
    if len(set(keys)) != len(keys):
        raise EvalError("duplicate prediction turns")
    if set(keys) != set(gold_index):
        raise EvalError("prediction and gold turn sets are misaligned")


def _turn_correct(pred_state, gold_state, schema: Schema) -> bool:
    return all(values_equal(pred_state.get(s), gold_state.get(s)) for s in schema.ids)


def joint_goal_accuracy(
    preds: list[PredictionRecord], gold_index, schema: Schema
) -> float:
    _aligned(preds, gold_index)
    correct = sum(
        _turn_correct(p.state, gold_index[(p.dialog_id, p.turn_index)], schema)
        for p in preds
    )
    return correct / len(preds) if preds else 0.0


def per_slot_accuracy(
    preds: list[PredictionRecord], gold_index, schema: Schema
) -> dict[str, float]:
    _aligned(preds, gold_index)
    hits = {s: 0 for s in schema.ids}
    for p in preds:
        gold = gold_index[(p.dialog_id, p.turn_index)]
        for s in schema.ids:
            if values_equal(p.state.get(s), gold.get(s)):
                hits[s] += 1
    n = len(preds)
    return {s: (hits[s] / n if n else 0.0) for s in schema.ids}


def carryover_turn_accuracy(decisions, gold_labels) -> float:
    """Fraction of turns whose keep/change decision is right for *every*
    slot.  Both arguments map (dialog id, turn index) to {slot: changed?}."""
    if set(decisions) != set(gold_labels):
        raise EvalError("decision and gold turn sets are misaligned")
    if not decisions:
        return 0.0
    correct = sum(
        1 for key, per_slot in decisions.items() if per_slot == gold_labels[key]
    )
    return correct / len(decisions)


def decisions_from_predictions(
    preds: list[PredictionRecord],
) -> dict[tuple[str, int], dict[str, bool]] | None:
    """Recover keep/change decisions from provenance tags; None when the
    predictions carry no carryover decisions (pure closed-vocab output)."""
    if all(tag == PROV_JST for p in preds for tag in p.provenance.values()):
        return None
    return {
        (p.dialog_id, p.turn_index): {
            slot: tag != PROV_CARRIED for slot, tag in p.provenance.items()
        }
        for p in preds
    }


@dataclass
class DepthRow:
    total: int
    incorrect: int

    @property
    def pct_incorrect(self) -> float:
        return 100.0 * self.incorrect / self.total if self.total else 0.0


def depth_breakdown(
    preds: list[PredictionRecord], gold_index, schema: Schema
) -> dict[int, DepthRow]:
    """Rows keyed by turn index: how many turns exist at that depth and what
    share of them has at least one wrong slot."""
    _aligned(preds, gold_index)
    rows: dict[int, DepthRow] = {}
    for p in preds:
        row = rows.setdefault(p.turn_index, DepthRow(0, 0))
        row.total += 1
        if not _turn_correct(p.state, gold_index[(p.dialog_id, p.turn_index)], schema):
            row.incorrect += 1
    return dict(sorted(rows.items()))


# ---------------------------------------------------------------------------
# Error taxonomy


def _occurs(flat: FlattenedDialog, norm_value: str) -> bool:
    return find_gold_span(flat, norm_value) is not None


def _strictly_contains(a: str, b: str) -> bool:
    """Token-level strict containment: b's tokens appear contiguously in a's
    and a is longer."""
    ta, tb = tokenize(a), tokenize(b)
    if len(ta) <= len(tb) or not tb:
        return False
    return any(ta[i : i + len(tb)] == tb for i in range(len(ta) - len(tb) + 1))


def categorize_error(
    pred: str | None, gold: str | None, flat: FlattenedDialog
) -> str:
    """Assign one category to an erroneous (turn, slot) value pair.

    Priority: unanswerable (one side is None), then boundary (one value
    strictly contains the other and both occur in the context), then
    resolution (the gold value never occurs in the context), and reference
    for every remaining mismatch.
    """
    if gold is None:
        return CAT_UNANSWERABLE_PRED_VALUE
    if pred is None:
        return CAT_UNANSWERABLE_PRED_NONE
    gold_n = normalize_value(gold)
    if pred == UNANSWERABLE_SENTINEL:
        pred_n, pred_in = pred, False
    else:
        pred_n = normalize_value(pred)
        pred_in = _occurs(flat, pred_n)
    gold_in = _occurs(flat, gold_n)
    if (
        pred_in
        and gold_in
        and (_strictly_contains(pred_n, gold_n) or _strictly_contains(gold_n, pred_n))
    ):
        return CAT_BOUNDARY
    if not gold_in:
        return CAT_RESOLUTION
    return CAT_REFERENCE


@dataclass
class ErrorBreakdown:
    counts: dict[str, int] = field(
        default_factory=lambda: {c: 0 for c in ERROR_CATEGORIES}
    )

    @property
    def total(self) -> int:
        return sum(self.counts.values())

    @property
    def percentages(self) -> dict[str, float]:
        total = self.total
        return {
            c: (100.0 * n / total if total else 0.0) for c, n in self.counts.items()
        }


def categorize_errors(
    preds: list[PredictionRecord], gold_index, contexts, schema: Schema
) -> ErrorBreakdown:
    """`contexts` maps (dialog id, turn index) to the flattened dialog."""
    _aligned(preds, gold_index)
    breakdown = ErrorBreakdown()
    for p in preds:
        key = (p.dialog_id, p.turn_index)
        gold = gold_index[key]
        for slot in schema.ids:
            pv, gv = p.state.get(slot), gold.get(slot)
            if values_equal(pv, gv):
                continue
            breakdown.counts[categorize_error(pv, gv, contexts[key])] += 1
    return breakdown


# ---------------------------------------------------------------------------
# Reports


@dataclass
class MetricsReport:
    n_turns: int
    joint_goal: float
    per_slot: dict[str, float]
    carryover_turn_acc: float | None
    depth: dict[int, DepthRow]
    errors: ErrorBreakdown

    def to_json_dict(self) -> dict:
        return {
            "n_turns": self.n_turns,
            "joint_goal_accuracy": self.joint_goal,
            "per_slot_accuracy": dict(sorted(self.per_slot.items())),
            "carryover_turn_accuracy": self.carryover_turn_acc,
            "depth": {
                str(d): {
                    "total": row.total,
                    "incorrect": row.incorrect,
                    "pct_incorrect": row.pct_incorrect,
                }
                for d, row in self.depth.items()
            },
            "errors": {
                "counts": self.errors.counts,
                "percentages": self.errors.percentages,
                "total": self.errors.total,
            },
        }

    def render(self) -> str:
        lines = []
        lines.append(f"turns evaluated: {self.n_turns}")
        lines.append(f"joint goal accuracy: {100.0 * self.joint_goal:.2f}%")
        if self.carryover_turn_acc is not None:
            lines.append(
                f"per-turn carryover accuracy: {100.0 * self.carryover_turn_acc:.2f}%"
            )
        lines.append("")
        lines.append("per-slot accuracy")
        width = max(len(s) for s in self.per_slot) if self.per_slot else 4
        for slot in sorted(self.per_slot):
            lines.append(f"  {slot:<{width}}  {self.per_slot[slot]:.4f}")
        lines.append("")
        lines.append("depth  turns  % incorrect")
        for d, row in self.depth.items():
            lines.append(f"  {d:>3}  {row.total:>5}  {row.pct_incorrect:>10.2f}")
        lines.append("")
        lines.append("error category breakdown")
        pcts = self.errors.percentages
        for cat in ERROR_CATEGORIES:
            lines.append(f"  {cat:<24} {self.errors.counts[cat]:>6}  {pcts[cat]:>6.1f}%")
        lines.append(f"  {'total':<24} {self.errors.total:>6}")
        return "\n".join(lines)


def compute_report(
    preds: list[PredictionRecord], corpus: list[Dialog], schema: Schema
) -> MetricsReport:
    gold_index = gold_state_index(corpus, schema)
    contexts = {
        (d.id, t): flatten(d, t) for d in corpus for t in range(1, d.n_turns + 1)
    }
    decisions = decisions_from_predictions(preds)
    carry_acc = None
    if decisions is not None:
        carry_acc = carryover_turn_accuracy(decisions, gold_carryover_labels(corpus, schema))
    return MetricsReport(
        n_turns=len(preds),
        joint_goal=joint_goal_accuracy(preds, gold_index, schema),
        per_slot=per_slot_accuracy(preds, gold_index, schema),
        carryover_turn_acc=carry_acc,
        depth=depth_breakdown(preds, gold_index, schema),
        errors=categorize_errors(preds, gold_index, contexts, schema),
    )
