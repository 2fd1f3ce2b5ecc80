"""Dialog corpora: loading, tokenization, flattening, and supervision labels.

A corpus is a list of dialogs; each user turn carries the gold slot-value
state holding after that turn.  For a turn ``t`` the tracker reads the
flattened conversation prefix (all utterances up to and including the t-th
user utterance, with ``[U]``/``[A]`` speaker markers) and decides, per slot,
whether the value changed, what kind of value it is, and where it sits in
the token stream.  Everything in this module is pure and deterministic.
"""

from __future__ import annotations

import json
import re
from collections import Counter
from dataclasses import dataclass
from pathlib import Path

CARRYOVER_KEEP = "keep"
CARRYOVER_CHANGE = "change"

TYPE_YES = "yes"
TYPE_NO = "no"
TYPE_DONTCARE = "dontcare"
TYPE_SPAN = "span"
# Fixed class order used by the type classifier everywhere.
TYPE_CLASSES = (TYPE_YES, TYPE_NO, TYPE_DONTCARE, TYPE_SPAN)

USER_MARKER = "[U]"
AGENT_MARKER = "[A]"
MARKERS = (USER_MARKER, AGENT_MARKER)

DONTCARE = "dontcare"
_DONTCARE_FORMS = {"dontcare", "dont care", "don't care", "do not care"}

# Predicted-state value reserved for extraction stages that cannot produce an
# answer; compares unequal to every gold value, including None.
UNANSWERABLE_SENTINEL = "<unanswerable>"

# A token is an alphanumeric run, optionally glued by ' . : when flanked by
# alphanumerics (keeps "don't", "15:30", "3.30" whole), or a single
# punctuation character.  Text is lowercased first, so the uppercase
# [U]/[A] marker tokens can never collide with tokenizer output.
_TOKEN_RE = re.compile(r"[a-z0-9]+(?:['.:][a-z0-9]+)*|[^a-z0-9\s]")


class CorpusError(ValueError):
    """A corpus, schema, or ontology file violates the expected format."""


# ---------------------------------------------------------------------------
# Text normalization


def tokenize_with_spans(text: str) -> list[tuple[str, int, int]]:
    """Tokenize lowercased text, keeping (token, char_start, char_end) triples."""
    return [(m.group(), m.start(), m.end()) for m in _TOKEN_RE.finditer(text.lower())]


def tokenize(text: str) -> list[str]:
    """Lowercase, split punctuation, collapse whitespace."""
    return [tok for tok, _, _ in tokenize_with_spans(text)]


def detokenize(tokens) -> str:
    return " ".join(tokens)


def normalize_value(value: str) -> str:
    """Canonical surface form of a slot value: tokenized, space-joined.

    All spellings of "don't care" collapse to the canonical ``dontcare``.
    """
    norm = detokenize(tokenize(value))
    if norm in _DONTCARE_FORMS:
        return DONTCARE
    return norm


def values_equal(a: str | None, b: str | None) -> bool:
    """Whether two slot values agree after normalization (None is a value)."""
    if a is None or b is None:
        return a is None and b is None
    if a == UNANSWERABLE_SENTINEL or b == UNANSWERABLE_SENTINEL:
        return False
    return normalize_value(a) == normalize_value(b)


# ---------------------------------------------------------------------------
# Domain types


@dataclass(frozen=True)
class SlotId:
    """A slot identified as domain.category.name, e.g. hotel.semi.area."""

    domain: str
    category: str
    name: str

    def __post_init__(self):
        for part in (self.domain, self.category, self.name):
            if not part or "." in part:
                raise CorpusError(f"invalid slot id component: {part!r}")

    def render(self) -> str:
        return f"{self.domain}.{self.category}.{self.name}"

    def __str__(self) -> str:
        return self.render()

    @classmethod
    def parse(cls, text: str) -> "SlotId":
        parts = text.split(".")
        if len(parts) != 3:
            raise CorpusError(f"slot id must have three dot-separated parts: {text!r}")
        return cls(*parts)


@dataclass(frozen=True)
class Schema:
    """The fixed, ordered slot inventory of a corpus."""

    slots: tuple[SlotId, ...]

    def __post_init__(self):
        if not self.slots:
            raise CorpusError("schema has no slots")
        ids = [s.render() for s in self.slots]
        if len(set(ids)) != len(ids):
            raise CorpusError("schema contains duplicate slot ids")
        object.__setattr__(self, "_ids", ids)
        object.__setattr__(self, "_index", {sid: i for i, sid in enumerate(ids)})

    @property
    def ids(self) -> list[str]:
        return list(self._ids)

    @property
    def size(self) -> int:
        return len(self.slots)

    def index(self, slot_id: str) -> int:
        try:
            return self._index[slot_id]
        except KeyError:
            raise CorpusError(f"unknown slot id: {slot_id!r}") from None

    def __contains__(self, slot_id: str) -> bool:
        return slot_id in self._index


@dataclass
class Turn:
    """One user turn: the preceding agent utterance (if any), the user
    utterance, and the gold state holding after the turn (total over the
    schema; None means the slot has no value)."""

    agent: str | None
    user: str
    state: dict[str, str | None]


@dataclass
class Dialog:
    id: str
    turns: list[Turn]

    @property
    def n_turns(self) -> int:
        return len(self.turns)


@dataclass(frozen=True)
class TokenAlignment:
    """Where a flattened token came from: 1-based turn, speaker, char range."""

    turn_index: int
    speaker: str  # "user" | "agent"
    char_start: int
    char_end: int


@dataclass(frozen=True)
class FlattenedDialog:
    """The conversation prefix ending at user turn ``turn_index`` as one
    token sequence with [U]/[A] markers; ``alignment[i]`` is None exactly at
    marker positions."""

    dialog_id: str
    turn_index: int
    tokens: tuple[str, ...]
    alignment: tuple[TokenAlignment | None, ...]

    @property
    def length(self) -> int:
        return len(self.tokens)

    def is_marker(self, i: int) -> bool:
        return self.alignment[i] is None

    @property
    def marker_positions(self) -> list[int]:
        return [i for i, a in enumerate(self.alignment) if a is None]

    @property
    def key(self) -> str:
        """Record key used by pretrained-embedding files."""
        return f"{self.dialog_id}#{self.turn_index}"


@dataclass(frozen=True)
class TrainingExample:
    """Per (sub-dialog, slot) supervision.

    ``type_label`` is set only when the value changed to a non-None value;
    ``span`` only for answerable span-type values.  ``answerable`` is False
    for deletions (value changed to None) and for span values that never
    occur in the flattened context.
    """

    dialog_id: str
    turn_index: int
    slot: str
    carryover: str
    type_label: str | None
    span: tuple[int, int] | None
    answerable: bool


# ---------------------------------------------------------------------------
# File loading


def _read_json(path) -> object:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as e:
        raise CorpusError(f"cannot read {path}: {e}") from e
    try:
        return json.loads(text)
    except json.JSONDecodeError as e:
        raise CorpusError(f"{path}: line {e.lineno} column {e.colno}: {e.msg}") from e


def load_schema(path) -> Schema:
    """Load ``{"slots": ["domain.category.name", ...]}``."""
    data = _read_json(path)
    if not isinstance(data, dict) or not isinstance(data.get("slots"), list):
        raise CorpusError(f"{path}: schema file must map 'slots' to a list")
    return Schema(tuple(SlotId.parse(s) for s in data["slots"]))


def load_ontology(path, schema: Schema) -> dict[str, list[str]]:
    """Load ``{"<slot-id>": [values...]}``; values are normalized, deduplicated,
    and sorted so class lists built from them are deterministic."""
    data = _read_json(path)
    if not isinstance(data, dict):
        raise CorpusError(f"{path}: ontology file must be a JSON object")
    ontology: dict[str, list[str]] = {}
    for slot_id, values in data.items():
        if slot_id not in schema:
            raise CorpusError(f"{path}: ontology slot {slot_id!r} not in schema")
        if not isinstance(values, list):
            raise CorpusError(f"{path}: ontology values for {slot_id!r} must be a list")
        normed = sorted({normalize_value(v) for v in values if normalize_value(v)})
        ontology[slot_id] = normed
    return ontology


def load_corpus(path, schema: Schema) -> list[Dialog]:
    """Load and validate ``{"dialogs": [...]}`` against the schema.

    Every turn's state is made total over the schema (absent slots become
    None).  Dialog order follows the file.
    """
    data = _read_json(path)
    if not isinstance(data, dict) or not isinstance(data.get("dialogs"), list):
        raise CorpusError(f"{path}: corpus file must map 'dialogs' to a list")
    dialogs = []
    for d in data["dialogs"]:
        dialogs.append(_parse_dialog(d, schema, path))
    return dialogs


def _parse_dialog(d: dict, schema: Schema, path) -> Dialog:
    dialog_id = d.get("id")
    if not dialog_id or not isinstance(dialog_id, str):
        raise CorpusError(f"{path}: dialog without a string id")
    raw_turns = d.get("turns")
    if not raw_turns:
        raise CorpusError(f"{path}: dialog {dialog_id!r} has no turns")
    turns = []
    for t, raw in enumerate(raw_turns, start=1):
        agent = raw.get("agent")
        user = raw.get("user")
        where = f"{path}: dialog {dialog_id!r} turn {t}"
        if t == 1 and agent is not None:
            raise CorpusError(f"{where}: first turn must not have an agent utterance")
        if agent is not None and not tokenize(agent):
            raise CorpusError(f"{where}: agent utterance has no tokens")
        if not isinstance(user, str) or not tokenize(user):
            raise CorpusError(f"{where}: user utterance missing or has no tokens")
        state: dict[str, str | None] = {sid: None for sid in schema.ids}
        for slot_id, value in (raw.get("state") or {}).items():
            if slot_id not in schema:
                raise CorpusError(f"{where}: unknown slot id {slot_id!r}")
            if value is not None:
                if not isinstance(value, str) or not normalize_value(value):
                    raise CorpusError(f"{where}: empty value for slot {slot_id!r}")
            state[slot_id] = value
        turns.append(Turn(agent=agent, user=user, state=state))
    return Dialog(id=dialog_id, turns=turns)


def corpus_to_json(dialogs: list[Dialog]) -> dict:
    """Inverse of load_corpus; None-valued slots are dropped from states."""
    return {
        "dialogs": [
            {
                "id": d.id,
                "turns": [
                    {
                        "agent": t.agent,
                        "user": t.user,
                        "state": {k: v for k, v in t.state.items() if v is not None},
                    }
                    for t in d.turns
                ],
            }
            for d in dialogs
        ]
    }


# ---------------------------------------------------------------------------
# Flattening and labels


def flatten(dialog: Dialog, t: int) -> FlattenedDialog:
    """Concatenate utterances up to the t-th user utterance, inserting [U]
    before each user utterance and [A] before each agent utterance."""
    if not 1 <= t <= dialog.n_turns:
        raise CorpusError(f"turn index {t} out of range for dialog {dialog.id!r}")
    tokens: list[str] = []
    alignment: list[TokenAlignment | None] = []
    for k, turn in enumerate(dialog.turns[:t], start=1):
        if turn.agent is not None:
            tokens.append(AGENT_MARKER)
            alignment.append(None)
            for tok, s, e in tokenize_with_spans(turn.agent):
                tokens.append(tok)
                alignment.append(TokenAlignment(k, "agent", s, e))
        tokens.append(USER_MARKER)
        alignment.append(None)
        for tok, s, e in tokenize_with_spans(turn.user):
            tokens.append(tok)
            alignment.append(TokenAlignment(k, "user", s, e))
    return FlattenedDialog(dialog.id, t, tuple(tokens), tuple(alignment))


def empty_state(schema: Schema) -> dict[str, str | None]:
    return {sid: None for sid in schema.ids}


def derive_carryover_label(
    prev: dict[str, str | None], cur: dict[str, str | None], slot: str
) -> str:
    """``change`` iff the slot's normalized value differs between the two
    states (None counts as a value)."""
    return CARRYOVER_KEEP if values_equal(prev.get(slot), cur.get(slot)) else CARRYOVER_CHANGE


def derive_type_label(value: str) -> str:
    norm = normalize_value(value)
    if norm == "yes":
        return TYPE_YES
    if norm == "no":
        return TYPE_NO
    if norm == DONTCARE:
        return TYPE_DONTCARE
    return TYPE_SPAN


def find_gold_span(flat: FlattenedDialog, value: str) -> tuple[int, int] | None:
    """Locate the normalized value as a token run in the flattened dialog.

    Returns the last occurrence by start index (the most recent mention is
    taken as the binding one), or None when the value never occurs.
    """
    needle = tokenize(value)
    if not needle:
        return None
    n = len(needle)
    best = None
    tokens = flat.tokens
    for start in range(len(tokens) - n + 1):
        if list(tokens[start : start + n]) == needle:
            best = (start, start + n - 1)
    return best


def build_examples(corpus: list[Dialog], schema: Schema) -> list[TrainingExample]:
    """One example per (dialog, turn, slot), in corpus order."""
    examples = []
    for dialog in corpus:
        prev = empty_state(schema)
        for t, turn in enumerate(dialog.turns, start=1):
            flat = flatten(dialog, t)
            for slot in schema.ids:
                carry = derive_carryover_label(prev, turn.state, slot)
                type_label = None
                span = None
                answerable = True
                value = turn.state.get(slot)
                if carry == CARRYOVER_CHANGE:
                    if value is None:
                        # Deletion: no class in the type inventory covers it.
                        answerable = False
                    else:
                        type_label = derive_type_label(value)
                        if type_label == TYPE_SPAN:
                            span = find_gold_span(flat, normalize_value(value))
                            answerable = span is not None
                examples.append(
                    TrainingExample(
                        dialog_id=dialog.id,
                        turn_index=t,
                        slot=slot,
                        carryover=carry,
                        type_label=type_label,
                        span=span,
                        answerable=answerable,
                    )
                )
            prev = turn.state
    return examples


def summarize_examples(examples: list[TrainingExample]) -> dict[str, int]:
    counts = Counter()
    counts["total"] = len(examples)
    for ex in examples:
        counts[ex.carryover] += 1
        if ex.type_label is not None:
            counts[f"type_{ex.type_label}"] += 1
        if ex.answerable:
            counts["answerable"] += 1
        else:
            counts["unanswerable"] += 1
    return dict(counts)


# ---------------------------------------------------------------------------
# Derivability


@dataclass
class DerivabilityReport:
    """Which turns' full gold state can be produced from their context."""

    n_turns: int
    derivable_turns: int
    per_turn: dict[tuple[str, int], bool]

    @property
    def coverage(self) -> float:
        return self.derivable_turns / self.n_turns if self.n_turns else 0.0


def value_derivable(flat: FlattenedDialog, value: str) -> bool:
    """A value is derivable when it is a yes/no/dontcare answer or occurs as
    a token span in the flattened context."""
    norm = normalize_value(value)
    if norm in ("yes", "no", DONTCARE):
        return True
    return find_gold_span(flat, norm) is not None


def derivability(corpus: list[Dialog], schema: Schema) -> DerivabilityReport:
    per_turn: dict[tuple[str, int], bool] = {}
    for dialog in corpus:
        for t, turn in enumerate(dialog.turns, start=1):
            flat = flatten(dialog, t)
            ok = all(
                value is None or value_derivable(flat, value)
                for value in turn.state.values()
            )
            per_turn[(dialog.id, t)] = ok
    n = len(per_turn)
    return DerivabilityReport(n, sum(per_turn.values()), per_turn)


def gold_state_index(
    corpus: list[Dialog], schema: Schema
) -> dict[tuple[str, int], dict[str, str | None]]:
    """Map (dialog id, turn index) to the gold state after that turn."""
    index = {}
    for dialog in corpus:
        for t, turn in enumerate(dialog.turns, start=1):
            index[(dialog.id, t)] = turn.state
    return index


def gold_carryover_labels(
    corpus: list[Dialog], schema: Schema
) -> dict[tuple[str, int], dict[str, bool]]:
    """Per (dialog, turn): slot -> True iff the gold value changed."""
    labels = {}
    for dialog in corpus:
        prev = empty_state(schema)
        for t, turn in enumerate(dialog.turns, start=1):
            labels[(dialog.id, t)] = {
                slot: derive_carryover_label(prev, turn.state, slot) == CARRYOVER_CHANGE
                for slot in schema.ids
            }
            prev = turn.state
    return labels
