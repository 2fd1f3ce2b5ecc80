"""Seeded synthetic dialog corpus and synthetic contextual embeddings.

The generator produces hotel/cafe booking chatter where every span-typed
value is guaranteed to appear verbatim in the conversation up to the turn
that introduces it, so the full gold state of every turn is derivable from
its context.  There are no deletions (values never revert to None), which
keeps the corpus learnable end to end by the sequential pipeline.

The embedding generator writes frozen "contextual" token vectors: a
deterministic per-token-type identity vector mixed with the previous
token's, plus speaker/position features, so the same token gets different
vectors in different contexts.
"""

from __future__ import annotations

import hashlib
import json
from pathlib import Path

import numpy as np

from .corpus import Dialog, Schema, flatten, load_corpus, load_schema
from .encoder import write_embedding_file

AREAS = ["east", "west", "north", "south", "centre"]
STARS = ["1", "2", "3", "4", "5"]
PRICES = ["cheap", "moderate", "expensive"]
FOODS = [
    "italian",
    "indian",
    "chinese",
    "thai",
    "british",
    "french",
    "mexican",
    "korean",
    "modern european",
    "north indian",
]
DAYS = ["monday", "tuesday", "wednesday", "thursday", "friday", "saturday", "sunday"]
PEOPLE = ["1", "2", "3", "4", "5", "6", "7", "8"]

SYNTH_SLOTS = [
    "hotel.semi.area",
    "hotel.semi.stars",
    "hotel.semi.parking",
    "hotel.semi.pricerange",
    "cafe.semi.food",
    "cafe.semi.area",
    "cafe.book.day",
    "cafe.book.people",
]

SYNTH_ONTOLOGY = {
    "hotel.semi.area": AREAS,
    "hotel.semi.stars": STARS,
    "hotel.semi.parking": ["yes", "no"],
    "hotel.semi.pricerange": PRICES,
    "cafe.semi.food": FOODS,
    "cafe.semi.area": AREAS,
    "cafe.book.day": DAYS,
    "cafe.book.people": PEOPLE,
}


def _opening_turn(rng) -> tuple[str, dict[str, str]]:
    area = rng.choice(AREAS)
    stars = rng.choice(STARS)
    pick = rng.integers(5)
    if pick == 0:
        return f"i need a hotel in the {area}", {"hotel.semi.area": area}
    if pick == 1:
        return (
            f"i am looking for a {stars} star hotel in the {area}",
            {"hotel.semi.area": area, "hotel.semi.stars": stars},
        )
    if pick == 2:
        return (
            f"hello , can you find my family a place to stay in the {area} ?",
            {"hotel.semi.area": area},
        )
    if pick == 3:
        return (
            f"good evening , we want a {stars} star hotel for our weekend trip",
            {"hotel.semi.stars": stars},
        )
    return f"find me a hotel with {stars} stars please", {"hotel.semi.stars": stars}


def _moves(rng, state: dict[str, str]):
    """Candidate follow-up turns given the current state; each move is
    (agent utterance, user utterance, state updates)."""
    moves = []
    if "hotel.semi.pricerange" not in state:
        price = rng.choice(PRICES)
        moves.append(
            (
                "what price range do you have in mind ?",
                f"something {price} would be great",
                {"hotel.semi.pricerange": price},
            )
        )
        moves.append(
            (
                "any budget i should know about ?",
                f"we are happy with a {price} room if possible",
                {"hotel.semi.pricerange": price},
            )
        )
        moves.append(
            (
                "what price range do you have in mind ?",
                "any price is fine , i do not care",
                {"hotel.semi.pricerange": "dontcare"},
            )
        )
    if "hotel.semi.parking" not in state:
        moves.append(
            (
                "do you need parking there ?",
                "yes i want free parking",
                {"hotel.semi.parking": "yes"},
            )
        )
        moves.append(
            (
                "will you bring a car along ?",
                "yes , it must have parking for my car",
                {"hotel.semi.parking": "yes"},
            )
        )
        moves.append(
            (
                "do you need parking there ?",
                "no parking needed thanks",
                {"hotel.semi.parking": "no"},
            )
        )
    if "hotel.semi.area" in state:
        new_area = rng.choice([a for a in AREAS if a != state["hotel.semi.area"]])
        moves.append(
            (
                f"the {state['hotel.semi.area']} side is quite busy .",
                f"actually make it the {new_area} instead",
                {"hotel.semi.area": new_area},
            )
        )
    if "cafe.semi.food" not in state:
        food = rng.choice(FOODS)
        cafe_area = rng.choice(AREAS)
        moves.append(
            (
                "anything else i can do for you today ?",
                f"yes , i also want a cafe serving {food} food in the {cafe_area}",
                {"cafe.semi.food": food, "cafe.semi.area": cafe_area},
            )
        )
    elif "cafe.semi.area" not in state:
        cafe_area = rng.choice(AREAS)
        moves.append(
            (
                f"there is a nice spot in the {cafe_area} .",
                "that area works for me",
                {"cafe.semi.area": cafe_area},
            )
        )
    if "cafe.semi.food" in state and "cafe.book.day" not in state:
        day = rng.choice(DAYS)
        people = rng.choice(PEOPLE)
        moves.append(
            (
                "when should i book the cafe for ?",
                f"book it for {people} people on {day}",
                {"cafe.book.day": day, "cafe.book.people": people},
            )
        )
        moves.append(
            (
                "which day works for you ?",
                f"{day} please , thank you",
                {"cafe.book.day": day},
            )
        )
    elif "cafe.book.day" in state and "cafe.book.people" not in state:
        people = rng.choice(PEOPLE)
        moves.append(
            (
                "how large is your party going to be ?",
                f"there will be {people} of us",
                {"cafe.book.people": people},
            )
        )
    moves.append(("you are all set .", "great , thank you very much", {}))
    moves.append(("happy to help with anything else .", "that is everything , goodbye", {}))
    return moves


def generate_dialog(rng, dialog_id: str) -> dict:
    n_turns = int(rng.integers(2, 6))
    state: dict[str, str] = {}
    turns = []
    user, updates = _opening_turn(rng)
    state.update(updates)
    turns.append({"agent": None, "user": user, "state": dict(state)})
    for _ in range(n_turns - 1):
        moves = _moves(rng, state)
        agent, user, updates = moves[int(rng.integers(len(moves)))]
        state.update(updates)
        turns.append({"agent": agent, "user": user, "state": dict(state)})
    return {"id": dialog_id, "turns": turns}


def generate_corpus(seed: int, n_dialogs: int, prefix: str) -> dict:
    rng = np.random.default_rng(seed)
    return {
        "dialogs": [
            generate_dialog(rng, f"{prefix}-{i:03d}") for i in range(n_dialogs)
        ]
    }


def write_synthetic_dataset(
    out_dir,
    seed: int = 20240811,
    n_train: int = 50,
    n_dev: int = 20,
    n_test: int = 20,
) -> dict[str, Path]:
    """Write train/dev/test corpora plus schema and ontology files."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = {}
    splits = [("train", n_train, seed), ("dev", n_dev, seed + 1), ("test", n_test, seed + 2)]
    for name, n, split_seed in splits:
        path = out_dir / f"{name}.json"
        corpus = generate_corpus(split_seed, n, f"syn-{name}")
        path.write_text(json.dumps(corpus, indent=1) + "\n", encoding="utf-8")
        paths[name] = path
    schema_path = out_dir / "schema.json"
    schema_path.write_text(json.dumps({"slots": SYNTH_SLOTS}, indent=1) + "\n", encoding="utf-8")
    paths["schema"] = schema_path
    ontology_path = out_dir / "ontology.json"
    ontology_path.write_text(json.dumps(SYNTH_ONTOLOGY, indent=1) + "\n", encoding="utf-8")
    paths["ontology"] = ontology_path
    return paths


# ---------------------------------------------------------------------------
# Synthetic contextual embeddings


def _identity_vector(token: str, dim: int) -> np.ndarray:
    digest = hashlib.blake2s(token.encode("utf-8")).digest()
    seed = int.from_bytes(digest[:8], "little")
    return np.random.default_rng(seed).uniform(-1.0, 1.0, size=dim)


def synthetic_records(
    corpora: list[list[Dialog]], dim: int = 48
) -> dict[str, np.ndarray]:
    """Contextual rows for every flattened sub-dialog of the given corpora."""
    if dim < 8:
        raise ValueError("embedding dim must be at least 8")
    id_dim = dim - 6
    cache: dict[str, np.ndarray] = {}

    def ident(token: str) -> np.ndarray:
        if token not in cache:
            cache[token] = _identity_vector(token, id_dim)
        return cache[token]

    records: dict[str, np.ndarray] = {}
    for corpus in corpora:
        for dialog in corpus:
            for t in range(1, dialog.n_turns + 1):
                flat = flatten(dialog, t)
                rows = np.zeros((flat.length, dim))
                for i, tok in enumerate(flat.tokens):
                    vec = 0.75 * ident(tok)
                    if i > 0:
                        vec = vec + 0.25 * ident(flat.tokens[i - 1])
                    rows[i, :id_dim] = vec
                    a = flat.alignment[i]
                    rows[i, id_dim + 0] = 1.0 if a is None else 0.0
                    rows[i, id_dim + 1] = 1.0 if a is not None and a.speaker == "user" else 0.0
                    rows[i, id_dim + 2] = 1.0 if a is not None and a.speaker == "agent" else 0.0
                    rows[i, id_dim + 3] = 1.0 if tok.isdigit() else 0.0
                    rows[i, id_dim + 4] = i / flat.length
                    rows[i, id_dim + 5] = (a.turn_index / t) if a is not None else 0.0
                records[flat.key] = rows
    return records


def write_synthetic_embeddings(path, corpus_paths, schema_path, dim: int = 48) -> int:
    """Build one embedding file covering every listed corpus; returns the
    number of records written."""
    schema = load_schema(schema_path)
    corpora = [load_corpus(p, schema) for p in corpus_paths]
    records = synthetic_records(corpora, dim=dim)
    write_embedding_file(path, dim, records)
    return len(records)
