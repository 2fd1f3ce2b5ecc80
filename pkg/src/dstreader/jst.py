"""Closed-vocabulary joint state tracking head.

Each slot gets its own affine classifier from the dialog embedding over the
slot's ontology values plus the two extra outcomes None and dontcare, so the
baseline can never emit a value outside its ontology.
"""

from __future__ import annotations

import numpy as np

from .corpus import DONTCARE
from .nncore import Parameter, init_param, softmax

NONE_CLASS = "<none>"


def build_classes(values: list[str]) -> list[str]:
    """Fixed class list for one slot: None, dontcare, then the ontology
    values in their (already sorted) order."""
    return [NONE_CLASS, DONTCARE] + [v for v in values if v != DONTCARE]


class JstHead:
    """Per-slot affine classifiers over closed class lists."""

    def __init__(
        self,
        enc_dim: int,
        classes: dict[str, list[str]],
        slot_order: list[str],
        rng: np.random.Generator,
    ):
        self.slot_order = list(slot_order)
        self.classes = {s: list(classes[s]) for s in self.slot_order}
        self.W: dict[str, Parameter] = {}
        self.b: dict[str, Parameter] = {}
        for slot in self.slot_order:
            n = len(self.classes[slot])
            self.W[slot] = init_param(rng, f"jst.{slot}.W", (enc_dim, n))
            self.b[slot] = init_param(rng, f"jst.{slot}.b", (n,))

    def parameters(self) -> list[Parameter]:
        params = []
        for slot in self.slot_order:
            params += [self.W[slot], self.b[slot]]
        return params


def jst_probs(e: np.ndarray, W: np.ndarray, b: np.ndarray) -> np.ndarray:
    return softmax(e @ W + b)


def jst_decode(probs: np.ndarray, classes: list[str]) -> str | None:
    """Argmax class; ties resolve to the earliest class in the list."""
    label = classes[int(np.argmax(probs))]
    return None if label == NONE_CLASS else label


def class_index(classes: list[str], value: str | None) -> int:
    """Gold class index for a normalized value; -1 when the closed
    vocabulary cannot represent it."""
    if value is None:
        return 0
    try:
        return classes.index(value)
    except ValueError:
        return -1
