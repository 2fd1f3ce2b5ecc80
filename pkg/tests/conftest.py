import json
from pathlib import Path

import numpy as np
import pytest

from dstreader.corpus import Schema, SlotId, load_corpus, load_schema

DATA_DIR = Path(__file__).parent / "data"
SYNTH_DIR = Path(__file__).parent.parent / "data" / "synthetic"


@pytest.fixture(scope="session")
def mw_schema() -> Schema:
    return load_schema(DATA_DIR / "multiwoz_schema.json")


@pytest.fixture(scope="session")
def example_corpus(mw_schema):
    return load_corpus(DATA_DIR / "example_dialog.json", mw_schema)


@pytest.fixture(scope="session")
def example_dialog(example_corpus):
    return example_corpus[0]


@pytest.fixture()
def tiny_schema() -> Schema:
    return Schema(
        (
            SlotId("hotel", "semi", "area"),
            SlotId("hotel", "semi", "parking"),
            SlotId("cafe", "semi", "food"),
        )
    )


def make_corpus_file(tmp_path, payload, name="corpus.json") -> Path:
    path = tmp_path / name
    path.write_text(json.dumps(payload), encoding="utf-8")
    return path


@pytest.fixture()
def rng() -> np.random.Generator:
    return np.random.default_rng(12345)
