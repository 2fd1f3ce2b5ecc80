"""Dialog encoder: token vectors -> affine -> BiLSTM -> per-token encodings.

Per token i the encoder emits d_i, the concatenation of the backward and
forward LSTM outputs at i; the dialog embedding e(t) concatenates the
backward output at the first position with the forward output at the last.
Question vectors (one learned vector per slot) live here too.

Token vectors come from a trainable table or from a frozen pretrained file
(one record of L rows per flattened sub-dialog); the [U]/[A] markers always
use dedicated learned vectors.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .corpus import AGENT_MARKER, USER_MARKER, FlattenedDialog
from .nncore import LSTMCell, Parameter, affine_backward, affine_forward, init_param

EMBED_TRAINABLE = "trainable"
EMBED_PRETRAINED = "pretrained"

UNK = "<unk>"

EMBEDDING_MAGIC = b"DSTE"
EMBEDDING_VERSION = 1


class EmbeddingFileError(ValueError):
    """A pretrained-embedding file is malformed or incomplete."""


class EncoderConfigError(ValueError):
    pass


# ---------------------------------------------------------------------------
# Vocabulary


class Vocabulary:
    """Deterministic token table: specials first, then sorted corpus tokens."""

    def __init__(self, tokens: list[str]):
        self.tokens = list(tokens)
        self._index = {tok: i for i, tok in enumerate(self.tokens)}
        if len(self._index) != len(self.tokens):
            raise EncoderConfigError("duplicate tokens in vocabulary")
        for special in (UNK, AGENT_MARKER, USER_MARKER):
            if special not in self._index:
                raise EncoderConfigError(f"vocabulary missing special token {special!r}")

    @classmethod
    def build(cls, flats: list[FlattenedDialog]) -> "Vocabulary":
        seen = set()
        for flat in flats:
            seen.update(flat.tokens)
        seen -= {AGENT_MARKER, USER_MARKER}
        return cls([UNK, AGENT_MARKER, USER_MARKER] + sorted(seen))

    def __len__(self) -> int:
        return len(self.tokens)

    def index(self, token: str) -> int:
        return self._index.get(token, self._index[UNK])

    def encode(self, tokens) -> np.ndarray:
        return np.array([self.index(t) for t in tokens], dtype=np.int64)


# ---------------------------------------------------------------------------
# Pretrained embedding file (frozen contextual vectors)


def write_embedding_file(path, dim: int, records: dict[str, np.ndarray]) -> None:
    """Records map "dialogid#t" to an (L, dim) float array."""
    path = Path(path)
    with path.open("wb") as f:
        f.write(struct.pack("<4sIII", EMBEDDING_MAGIC, EMBEDDING_VERSION, dim, len(records)))
        for key, rows in records.items():
            rows = np.asarray(rows, dtype="<f8")
            if rows.ndim != 2 or rows.shape[1] != dim:
                raise EmbeddingFileError(f"record {key!r} has shape {rows.shape}, want (L, {dim})")
            kb = key.encode("utf-8")
            f.write(struct.pack("<I", len(kb)))
            f.write(kb)
            f.write(struct.pack("<I", rows.shape[0]))
            f.write(np.ascontiguousarray(rows).tobytes())


def load_embedding_file(path) -> tuple[int, dict[str, np.ndarray]]:
    path = Path(path)
    data = path.read_bytes()
    off = 0

    def take(n: int) -> bytes:
        nonlocal off
        if off + n > len(data):
            raise EmbeddingFileError(f"{path}: truncated embedding file")
        chunk = data[off : off + n]
        off += n
        return chunk

    magic, version, dim, count = struct.unpack("<4sIII", take(16))
    if magic != EMBEDDING_MAGIC:
        raise EmbeddingFileError(f"{path}: bad magic {magic!r}")
    if version != EMBEDDING_VERSION:
        raise EmbeddingFileError(f"{path}: unsupported version {version}")
    records: dict[str, np.ndarray] = {}
    for _ in range(count):
        (key_len,) = struct.unpack("<I", take(4))
        key = take(key_len).decode("utf-8")
        (n_rows,) = struct.unpack("<I", take(4))
        rows = np.frombuffer(take(8 * n_rows * dim), dtype="<f8").reshape(n_rows, dim).copy()
        records[key] = rows
    if off != len(data):
        raise EmbeddingFileError(f"{path}: trailing bytes")
    return dim, records


def record_for(flat: FlattenedDialog, records: dict[str, np.ndarray]) -> np.ndarray:
    try:
        rows = records[flat.key]
    except KeyError:
        raise EmbeddingFileError(f"missing pretrained record for {flat.key!r}") from None
    if rows.shape[0] != flat.length:
        raise EmbeddingFileError(
            f"record {flat.key!r} has {rows.shape[0]} rows for {flat.length} tokens"
        )
    return rows


# ---------------------------------------------------------------------------
# Encoder


@dataclass(frozen=True)
class EncoderConfig:
    embed_mode: str = EMBED_TRAINABLE
    embed_dim: int = 100          # trainable-table width
    pretrained_dim: int | None = None
    affine_dim: int = 200
    hidden_dim: int = 50          # per direction

    def __post_init__(self):
        if self.embed_mode not in (EMBED_TRAINABLE, EMBED_PRETRAINED):
            raise EncoderConfigError(f"unknown embed mode {self.embed_mode!r}")
        if self.embed_mode == EMBED_PRETRAINED and not self.pretrained_dim:
            raise EncoderConfigError("pretrained mode needs pretrained_dim")
        if min(self.embed_dim, self.affine_dim, self.hidden_dim) <= 0:
            raise EncoderConfigError("encoder dimensions must be positive")

    @property
    def input_dim(self) -> int:
        if self.embed_mode == EMBED_PRETRAINED:
            return int(self.pretrained_dim)
        return self.embed_dim

    @property
    def enc_dim(self) -> int:
        return 2 * self.hidden_dim


@dataclass
class EncoderState:
    """Forward-pass cache for one batch."""

    flats: list[FlattenedDialog]
    lengths: np.ndarray            # (B,)
    rev_idx: np.ndarray            # (B, Lmax) per-example reversal (involution)
    token_idx: np.ndarray | None   # (B, Lmax) vocab rows, trainable mode
    marker_slots: list[tuple[int, int, int]]  # (b, pos, marker_row), pretrained mode
    X: np.ndarray                  # (B, Lmax, input_dim)
    H1: np.ndarray                 # (B, Lmax, affine_dim)
    fwd_caches: list
    bwd_caches: list
    D: np.ndarray                  # (B, Lmax, enc_dim), rows past length are zero
    e: np.ndarray                  # (B, enc_dim)


class Encoder:
    """One encoder instance per model; parameters are not shared."""

    def __init__(
        self,
        config: EncoderConfig,
        rng: np.random.Generator,
        vocab: Vocabulary | None = None,
        n_slots: int = 0,
        with_questions: bool = False,
    ):
        self.config = config
        self.vocab = vocab
        if config.embed_mode == EMBED_TRAINABLE:
            if vocab is None:
                raise EncoderConfigError("trainable mode needs a vocabulary")
            self.emb = init_param(rng, "emb", (len(vocab), config.embed_dim))
            self.marker_emb = None
        else:
            self.emb = None
            # Row 0 backs [A], row 1 backs [U]; file rows stay frozen.
            self.marker_emb = init_param(rng, "marker_emb", (2, config.input_dim))
        self.affine_W = init_param(rng, "affine.W", (config.input_dim, config.affine_dim))
        self.affine_b = init_param(rng, "affine.b", (config.affine_dim,))
        self.lstm_fwd = LSTMCell("lstm_fwd", config.affine_dim, config.hidden_dim, rng)
        self.lstm_bwd = LSTMCell("lstm_bwd", config.affine_dim, config.hidden_dim, rng)
        self.questions = None
        if with_questions:
            if n_slots <= 0:
                raise EncoderConfigError("question vectors need a positive slot count")
            self.questions = init_param(rng, "questions", (n_slots, config.enc_dim))

    def parameters(self) -> list[Parameter]:
        params = []
        if self.emb is not None:
            params.append(self.emb)
        if self.marker_emb is not None:
            params.append(self.marker_emb)
        params += [self.affine_W, self.affine_b]
        params += self.lstm_fwd.parameters() + self.lstm_bwd.parameters()
        if self.questions is not None:
            params.append(self.questions)
        return params

    def question_vector(self, slot_idx: int) -> np.ndarray:
        if self.questions is None:
            raise EncoderConfigError("encoder has no question vectors")
        if not 0 <= slot_idx < self.questions.value.shape[0]:
            raise EncoderConfigError(f"slot index {slot_idx} out of range")
        return self.questions.value[slot_idx]

    def _marker_row(self, token: str) -> int | None:
        if token == AGENT_MARKER:
            return 0
        if token == USER_MARKER:
            return 1
        return None

    def forward(
        self,
        flats: list[FlattenedDialog],
        records: dict[str, np.ndarray] | None = None,
    ) -> EncoderState:
        cfg = self.config
        B = len(flats)
        lengths = np.array([f.length for f in flats], dtype=np.int64)
        Lmax = int(lengths.max())

        X = np.zeros((B, Lmax, cfg.input_dim))
        token_idx = None
        marker_slots: list[tuple[int, int, int]] = []
        if cfg.embed_mode == EMBED_TRAINABLE:
            token_idx = np.zeros((B, Lmax), dtype=np.int64)
            for b, flat in enumerate(flats):
                idx = self.vocab.encode(flat.tokens)
                token_idx[b, : flat.length] = idx
                X[b, : flat.length] = self.emb.value[idx]
        else:
            if records is None:
                raise EmbeddingFileError("pretrained mode needs an embedding record map")
            for b, flat in enumerate(flats):
                rows = record_for(flat, records)
                X[b, : flat.length] = rows
                for pos, tok in enumerate(flat.tokens):
                    row = self._marker_row(tok)
                    if row is not None:
                        X[b, pos] = self.marker_emb.value[row]
                        marker_slots.append((b, pos, row))

        H1 = affine_forward(X, self.affine_W.value, self.affine_b.value)

        # Per-example reversal of the valid prefix; padded tail maps to itself,
        # which makes the index array its own inverse.
        rev_idx = np.tile(np.arange(Lmax), (B, 1))
        for b in range(B):
            L = int(lengths[b])
            rev_idx[b, :L] = np.arange(L - 1, -1, -1)

        F, fwd_caches = self.lstm_fwd.forward(H1)
        H1_rev = np.take_along_axis(H1, rev_idx[:, :, None], axis=1)
        Brev, bwd_caches = self.lstm_bwd.forward(H1_rev)

        H = cfg.hidden_dim
        D = np.zeros((B, Lmax, cfg.enc_dim))
        e = np.empty((B, cfg.enc_dim))
        Bwd = np.take_along_axis(Brev, rev_idx[:, :, None], axis=1)  # backward output per position
        for b in range(B):
            L = int(lengths[b])
            D[b, :L, :H] = Bwd[b, :L]
            D[b, :L, H:] = F[b, :L]
            e[b, :H] = Bwd[b, 0]
            e[b, H:] = F[b, L - 1]
        return EncoderState(
            flats=flats,
            lengths=lengths,
            rev_idx=rev_idx,
            token_idx=token_idx,
            marker_slots=marker_slots,
            X=X,
            H1=H1,
            fwd_caches=fwd_caches,
            bwd_caches=bwd_caches,
            D=D,
            e=e,
        )

    def backward(
        self,
        state: EncoderState,
        dD: np.ndarray | None = None,
        de: np.ndarray | None = None,
    ) -> None:
        """Accumulate gradients for upstream dD (B, Lmax, enc_dim) and/or
        de (B, enc_dim).  dD must be zero past each example's length."""
        cfg = self.config
        B, Lmax = state.H1.shape[:2]
        H = cfg.hidden_dim
        dBwd = np.zeros((B, Lmax, H))
        dF = np.zeros((B, Lmax, H))
        if dD is not None:
            dBwd += dD[:, :, :H]
            dF += dD[:, :, H:]
        if de is not None:
            for b in range(B):
                L = int(state.lengths[b])
                dBwd[b, 0] += de[b, :H]
                dF[b, L - 1] += de[b, H:]

        dH1 = self.lstm_fwd.backward(dF, state.fwd_caches)
        dBrev = np.take_along_axis(dBwd, state.rev_idx[:, :, None], axis=1)
        dH1_rev = self.lstm_bwd.backward(dBrev, state.bwd_caches)
        dH1 += np.take_along_axis(dH1_rev, state.rev_idx[:, :, None], axis=1)

        dX, dW, db = affine_backward(dH1, state.X, self.affine_W.value)
        self.affine_W.grad += dW
        self.affine_b.grad += db

        if cfg.embed_mode == EMBED_TRAINABLE:
            for b, flat in enumerate(state.flats):
                L = flat.length
                np.add.at(self.emb.grad, state.token_idx[b, :L], dX[b, :L])
        else:
            # File rows are frozen; only the marker vectors learn.
            for b, pos, row in state.marker_slots:
                self.marker_emb.grad[row] += dX[b, pos]
