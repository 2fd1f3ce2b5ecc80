"""Prediction heads over the dialog encoding, and span decoding.

Carryover: per-slot change probabilities, sigmoid(e . W column), all slots
jointly.  Type: softmax over {yes, no, dontcare, span} from an affine layer
on (e ; q_slot).  Span: two bilinear scorers (start and end) between every
token encoding and the slot's question vector, softmax over positions.
"""

from __future__ import annotations

import numpy as np

from .nncore import Parameter, ShapeError, init_param, sigmoid, softmax


class CarryoverHead:
    """Joint change predictor: one weight column per slot, no bias."""

    def __init__(self, enc_dim: int, n_slots: int, rng: np.random.Generator):
        self.W = init_param(rng, "carryover.W", (enc_dim, n_slots))

    def parameters(self) -> list[Parameter]:
        return [self.W]


def carryover_probs(e: np.ndarray, W: np.ndarray) -> np.ndarray:
    """Probability of change for every slot; element i = sigmoid(e . W[:, i])."""
    if e.shape[-1] != W.shape[0]:
        raise ShapeError(f"carryover: e{e.shape} W{W.shape}")
    return sigmoid(e @ W)


class TypeHead:
    """Affine from (e ; q) to the four value-type logits."""

    def __init__(self, enc_dim: int, n_classes: int, rng: np.random.Generator):
        self.W = init_param(rng, "type.W", (2 * enc_dim, n_classes))
        self.b = init_param(rng, "type.b", (n_classes,))

    def parameters(self) -> list[Parameter]:
        return [self.W, self.b]


def type_probs(e: np.ndarray, q: np.ndarray, W: np.ndarray, b: np.ndarray) -> np.ndarray:
    z = np.concatenate([e, q], axis=-1)
    if z.shape[-1] != W.shape[0]:
        raise ShapeError(f"type head: (e;q){z.shape} W{W.shape}")
    return softmax(z @ W + b)


class SpanHead:
    """Independent bilinear scorers for span start and end positions."""

    def __init__(self, enc_dim: int, rng: np.random.Generator):
        self.theta_start = init_param(rng, "span.theta_start", (enc_dim, enc_dim))
        self.theta_end = init_param(rng, "span.theta_end", (enc_dim, enc_dim))

    def parameters(self) -> list[Parameter]:
        return [self.theta_start, self.theta_end]


def span_distributions(
    D: np.ndarray, q: np.ndarray, theta_start: np.ndarray, theta_end: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """Start and end distributions over all L token positions (markers are
    candidates too) for per-token encodings D (L, enc_dim)."""
    if D.ndim != 2 or D.shape[1] != theta_start.shape[0]:
        raise ShapeError(f"span head: D{D.shape} theta{theta_start.shape}")
    p_start = softmax(D @ (theta_start @ q))
    p_end = softmax(D @ (theta_end @ q))
    return p_start, p_end


def decode_span(
    p_start: np.ndarray,
    p_end: np.ndarray,
    max_len: int | None = None,
) -> tuple[int, int]:
    """Best (i, i') with i <= i' (and i' - i < max_len when set) maximizing
    P_start(i) * P_end(i'); ties go to the smallest i, then smallest i'.

    Single left-to-right scan: the best start index over a (windowed) prefix
    is non-decreasing in i', so refusing to replace the incumbent on equal
    products realizes the tie-break exactly.
    """
    L = p_start.shape[0]
    if p_end.shape[0] != L or L == 0:
        raise ShapeError(f"decode_span: start{p_start.shape} end{p_end.shape}")
    if max_len is not None and max_len < 1:
        raise ValueError("max_len must be >= 1")
    best_i, best_j, best_score = 0, 0, -1.0
    start_i = 0  # argmax of p_start over the allowed window, earliest on ties
    for j in range(L):
        lo = 0 if max_len is None else max(0, j - max_len + 1)
        if start_i < lo:
            start_i = lo
            for k in range(lo + 1, j + 1):
                if p_start[k] > p_start[start_i]:
                    start_i = k
        elif p_start[j] > p_start[start_i]:
            start_i = j
        score = p_start[start_i] * p_end[j]
        if score > best_score:
            best_i, best_j, best_score = start_i, j, score
    return best_i, best_j


def decode_span_avoiding(
    p_start: np.ndarray,
    p_end: np.ndarray,
    excluded: np.ndarray,
    max_len: int | None = None,
) -> tuple[int, int]:
    """decode_span, then if the winning span contains an excluded position
    (marker tokens), fall back to the best span within a single excluded-free
    segment.  If every position is excluded, the unfiltered span stands."""
    i, j = decode_span(p_start, p_end, max_len)
    if not excluded[i : j + 1].any():
        return i, j
    best = None
    best_score = -1.0
    seg_start = None
    bounds = []
    for pos in range(len(excluded) + 1):
        inside = pos < len(excluded) and not excluded[pos]
        if inside and seg_start is None:
            seg_start = pos
        elif not inside and seg_start is not None:
            bounds.append((seg_start, pos))
            seg_start = None
    for lo, hi in bounds:
        si, sj = decode_span(p_start[lo:hi], p_end[lo:hi], max_len)
        score = p_start[lo + si] * p_end[lo + sj]
        if score > best_score:
            best, best_score = (lo + si, lo + sj), score
    return best if best is not None else (i, j)
